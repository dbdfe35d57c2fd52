//! Model checkpoints in the FWWT weight format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use foodwaste_tensor::weights::{read_weights, write_weights};
use foodwaste_tensor::{ParamSet, TensorError};

use crate::error::{Error, Result};

fn lift_io(path: &Path, e: TensorError) -> Error {
    match e {
        TensorError::Io(io) => Error::io(path, io),
        TensorError::Format(msg) => Error::Format {
            path: path.to_path_buf(),
            msg,
        },
        other => other.into(),
    }
}

pub fn save_checkpoint(params: &ParamSet<f32>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_weights(params, &mut out).map_err(|e| lift_io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads an FWWT file without checking it against a model.
pub fn read_checkpoint(path: &Path) -> Result<ParamSet<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_weights(BufReader::new(file)).map_err(|e| lift_io(path, e))
}

/// Checks `loaded` against the tensors a model expects. Names are visited in
/// lexicographic order and the first missing, unexpected or mis-shaped
/// tensor is reported. Use counts are taken from the template.
pub fn conform(mut loaded: ParamSet<f32>, template: &ParamSet<f32>) -> Result<ParamSet<f32>> {
    let mut names: Vec<&str> = template.names().chain(loaded.names()).collect();
    names.sort_unstable();
    names.dedup();
    for name in names {
        let mismatch = |detail: String| Error::Mismatch {
            name: name.to_string(),
            detail,
        };
        match (template.get(name), loaded.get(name)) {
            (Ok(_), Err(_)) => return Err(mismatch("missing from checkpoint".into())),
            (Err(_), Ok(_)) => return Err(mismatch("not part of this model".into())),
            (Ok(t), Ok(l)) if t.value.shape() != l.value.shape() => {
                return Err(mismatch(format!(
                    "shape {:?}, model expects {:?}",
                    l.value.shape(),
                    t.value.shape()
                )))
            }
            _ => {}
        }
    }
    for (name, p) in loaded.iter_mut() {
        p.uses = template.get(name)?.uses;
    }
    Ok(loaded)
}

/// Loads a checkpoint into the shape of `template`; nothing is returned
/// unless the whole file parses and conforms.
pub fn load_checkpoint(path: &Path, template: &ParamSet<f32>) -> Result<ParamSet<f32>> {
    conform(read_checkpoint(path)?, template)
}
