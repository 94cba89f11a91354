use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use demoforge_core::codec::{self, ObjectBuilder};
use demoforge_core::protocol::{decode_frame, frame_object};
use demoforge_core::ActionEvent;
use serde_json::Value;

use super::{io_err, line_text, load_manifest, read_log, Store, StoreError, StoreResult, ACTIONS_LOG, FRAMES_LOG};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExportFilter {
    pub scene: Option<String>,
    pub robot: Option<String>,
    pub label: Option<String>,
    pub finalized_only: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportSummary {
    /// (episode_id, row count)
    pub episodes: Vec<(String, u64)>,
}

/// Writes `<out>/index.log` and one `<out>/<episode_id>.aligned.log` per
/// selected episode. Each aligned row is one recorded frame joined with the
/// actions applied at its tick (`null` when there were none). The output is
/// a function of the store contents only.
pub fn export_dataset(store: &Store, filter: &ExportFilter, out: &Path) -> StoreResult<ExportSummary> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut index = Vec::new();
    let mut summary = ExportSummary { episodes: Vec::new() };
    for id in store.episode_ids()? {
        let dir = store.episode_dir(&id);
        let Ok(m) = load_manifest(&dir) else { continue };
        let keep = filter.scene.as_ref().is_none_or(|s| *s == m.scene)
            && filter.robot.as_ref().is_none_or(|r| *r == m.robot)
            && filter.label.as_ref().is_none_or(|l| *l == m.label)
            && (!filter.finalized_only || m.finalized);
        if !keep {
            continue;
        }
        let rows = aligned_rows(&dir)?;
        let name = format!("{id}.aligned.log");
        let mut body = Vec::new();
        for r in &rows {
            body.extend_from_slice(r.as_bytes());
            body.push(b'\n');
        }
        let path = out.join(&name);
        fs::write(&path, &body).map_err(io_err(&path))?;

        let annotations: Vec<Value> =
            store.annotations(&dir)?.into_iter().map(|a| Value::from(a.annotation_id)).collect();
        let media: Vec<Value> = store.media_for(&dir)?.into_iter().map(|m| Value::from(m.media_id)).collect();
        let entry = ObjectBuilder::new()
            .set("aligned", name)
            .set("annotations", annotations)
            .set("manifest", Value::Object(m.to_object()))
            .set("media", media)
            .set("rows", rows.len() as u64)
            .encode();
        index.extend_from_slice(entry.as_bytes());
        index.push(b'\n');
        summary.episodes.push((id, rows.len() as u64));
    }
    let path = out.join("index.log");
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    f.write_all(&index).map_err(io_err(&path))?;
    Ok(summary)
}

fn aligned_rows(dir: &Path) -> StoreResult<Vec<String>> {
    let read = |name: &str| {
        let path = dir.join(name);
        read_log(&path).map_err(io_err(&path))
    };
    let bad = |name: &str, n: usize, e: String| StoreError::Invalid(format!("{}/{name}:{n}: {e}", dir.display()));

    let mut actions: BTreeMap<u64, Vec<Value>> = BTreeMap::new();
    for (n, b) in read(ACTIONS_LOG)?.lines {
        let a = line_text(&b).and_then(ActionEvent::decode).map_err(|e| bad(ACTIONS_LOG, n, e.to_string()))?;
        let obj = a.to_object().map_err(|e| bad(ACTIONS_LOG, n, e.to_string()))?;
        actions.entry(a.tick).or_default().push(Value::Object(obj));
    }
    let mut rows = Vec::new();
    for (n, b) in read(FRAMES_LOG)?.lines {
        let f = line_text(&b).and_then(decode_frame).map_err(|e| bad(FRAMES_LOG, n, e.to_string()))?;
        let mut row = frame_object(&f).map_err(|e| bad(FRAMES_LOG, n, e.to_string()))?;
        row.remove("t");
        row.insert("action".into(), actions.remove(&f.tick).map_or(Value::Null, Value::Array));
        rows.push(codec::to_canonical(row));
    }
    Ok(rows)
}
