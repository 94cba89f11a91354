use std::path::Path;

use demoforge_core::protocol::{decode_frame, encode_frame};
use demoforge_core::record::{self, first_divergence};
use demoforge_core::{ActionEvent, SimFrame, World};

use super::{line_text, read_log, read_provisional, validate_episode, StoreError, ValidationReport, ACTIONS_LOG, FRAMES_LOG};
use crate::catalog::Catalog;

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("scene `{scene}` is not in the catalog")]
    UnknownScene { scene: String },
    #[error("scene digest mismatch for `{scene}`: recorded {recorded}, catalog {catalog}")]
    DigestMismatch { scene: String, recorded: String, catalog: String },
    #[error("episode failed validation:\n{0}")]
    Invalid(ValidationReport),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Replay(#[from] record::ReplayError),
}

#[derive(Debug)]
pub struct ReplayOutcome {
    pub replayed: Vec<SimFrame>,
    pub recorded_len: usize,
    /// Tick of the first replayed frame whose encoding differs from the log
    /// (or where either stream ends early).
    pub divergence: Option<u64>,
}

impl ReplayOutcome {
    pub fn matches(&self) -> bool {
        self.divergence.is_none()
    }
}

/// Re-simulates an episode from its stored start state and actions with the
/// catalog's version of its scene, and compares against the frame log byte for byte.
pub fn replay_episode(dir: &Path, catalog: &Catalog) -> Result<ReplayOutcome, ReplayError> {
    let report = validate_episode(dir);
    if !report.ok() {
        return Err(ReplayError::Invalid(report));
    }
    let p = read_provisional(dir)?;
    let entry = catalog.scene(&p.scene).ok_or_else(|| ReplayError::UnknownScene { scene: p.scene.clone() })?;
    if entry.digest != p.scene_digest {
        return Err(ReplayError::DigestMismatch {
            scene: p.scene.clone(),
            recorded: p.scene_digest.clone(),
            catalog: entry.digest.clone(),
        });
    }
    let (world, _) = World::with_model(entry.spec.clone(), entry.robot.clone(), p.rate())
        .map_err(|e| ReplayError::Replay(e.into()))?;

    let io = |name: &str| {
        let path = dir.join(name);
        read_log(&path).map_err(super::io_err(&path))
    };
    let lines: Vec<String> = io(FRAMES_LOG)?
        .lines
        .into_iter()
        .map(|(_, b)| String::from_utf8(b).expect("validated"))
        .collect();
    let last = lines.last().map(|l| decode_frame(l).expect("validated").tick);
    let actions: Vec<ActionEvent> = io(ACTIONS_LOG)?
        .lines
        .iter()
        .map(|(_, b)| ActionEvent::decode(line_text(b).expect("validated")).expect("validated"))
        .filter(|a| last.is_some_and(|t| a.tick <= t))
        .collect();

    let replayed = record::replay(&world, &p.start_state, &actions, lines.len() as u64)?;
    let divergence = replayed
        .iter()
        .zip(&lines)
        .find(|(f, l)| encode_frame(f).ok().as_deref() != Some(l.as_str()))
        .map(|(f, _)| f.tick)
        .or_else(|| {
            let recorded: Vec<SimFrame> = lines.iter().map(|l| decode_frame(l).expect("validated")).collect();
            first_divergence(&recorded, &replayed)
        });
    Ok(ReplayOutcome { replayed, recorded_len: lines.len(), divergence })
}
