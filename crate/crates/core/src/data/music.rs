use std::fs;
use std::path::Path;

use super::{io_err, DataError};

/// Piano keys per frame.
pub const NOTES: usize = 88;

/// Active notes per timestep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PianoRoll {
    pub steps: Vec<Vec<u8>>,
}

/// Read a JSON list of sequences, each a list of timesteps, each a list of
/// note indices in `[0, 88)`. Sequences need at least two steps.
pub fn load_pianoroll_json(path: &Path) -> Result<Vec<PianoRoll>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let raw: Vec<Vec<Vec<i64>>> = serde_json::from_str(&text).map_err(|e| DataError::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut out = Vec::with_capacity(raw.len());
    for (seq, steps) in raw.into_iter().enumerate() {
        if steps.len() < 2 {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                msg: format!(
                    "sequence {seq} has {} steps; next-step prediction needs at least 2",
                    steps.len()
                ),
            });
        }
        let mut conv = Vec::with_capacity(steps.len());
        for (step, notes) in steps.into_iter().enumerate() {
            let mut s = Vec::with_capacity(notes.len());
            for note in notes {
                if !(0..NOTES as i64).contains(&note) {
                    return Err(DataError::NoteRange { seq, step, note });
                }
                s.push(note as u8);
            }
            s.sort_unstable();
            s.dedup();
            conv.push(s);
        }
        out.push(PianoRoll { steps: conv });
    }
    Ok(out)
}

pub fn write_pianoroll_json(path: &Path, rolls: &[PianoRoll]) -> Result<(), DataError> {
    let raw: Vec<&Vec<Vec<u8>>> = rolls.iter().map(|r| &r.steps).collect();
    fs::write(path, serde_json::to_string(&raw).expect("serializable")).map_err(io_err(path))
}
