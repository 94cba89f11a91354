#![allow(dead_code)]

use std::path::Path;

use demoforge::catalog::Catalog;
use demoforge::client::{Api, Conn};
use demoforge::config::{FileConfig, Overrides, ServeConfig};
use demoforge::service::Server;

pub fn config(data_dir: &Path) -> ServeConfig {
    let over = Overrides { data_dir: Some(data_dir.into()), bind: Some("127.0.0.1:0".into()), ..Default::default() };
    ServeConfig::resolve(over, FileConfig::default()).unwrap()
}

pub async fn server(data_dir: &Path) -> (Server, Api) {
    server_with(config(data_dir)).await
}

pub async fn server_with(cfg: ServeConfig) -> (Server, Api) {
    let server = Server::start(&cfg, Catalog::bundled()).await.unwrap();
    let api = Api::new(&format!("http://{}", server.addr));
    (server, api)
}

pub async fn connect(api: &Api, scene: &str) -> (String, Conn) {
    let session = api.create_session(scene, None).await.unwrap();
    let conn = api.connect(&session, "tester").await.unwrap();
    (session, conn)
}
