//! Versioned checkpoint container.
//!
//! Layout (see `docs/formats.md`): the magic `S2SRLCKP`, a little-endian
//! u32 format version, a little-endian u64 header length, a JSON header
//! carrying the model configuration, vocabulary sizes and hash, and the
//! ordered parameter manifest (name, rows, cols), followed by the raw
//! parameter values as little-endian f64 in manifest order. Writes go to
//! a temporary file in the target directory and are renamed into place.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"S2SRLCKP";
const VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    config: ModelConfig,
    v_size: usize,
    l_size: usize,
    vocab_hash: String,
    params: Vec<ParamEntry>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// Write a checkpoint atomically (temp file + rename).
pub fn save(model: &Model, vocab_hash: &str, path: &Path) -> Result<()> {
    let header = Header {
        config: model.config.clone(),
        v_size: model.v_size,
        l_size: model.l_size,
        vocab_hash: vocab_hash.to_string(),
        params: model
            .store()
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                rows: p.rows,
                cols: p.cols,
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("ckpt")
    ));
    {
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?,
        );
        let io = |e| Error::io(&tmp, e);
        f.write_all(MAGIC).map_err(io)?;
        f.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())
            .map_err(io)?;
        f.write_all(&header_json).map_err(io)?;
        for (_, p) in model.store().iter() {
            for &v in p.data() {
                f.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        f.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug)]
pub struct Loaded {
    pub model: Model,
    pub vocab_hash: String,
}

/// Read a checkpoint back into a model. `expect_vocab_hash`, when given,
/// must match the stored hash; a mismatch is a load error.
pub fn load(path: &Path, expect_vocab_hash: Option<&str>) -> Result<Loaded> {
    let mut f =
        std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);

    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut v4 = [0u8; 4];
    f.read_exact(&mut v4).map_err(io)?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let mut l8 = [0u8; 8];
    f.read_exact(&mut l8).map_err(io)?;
    let header_len = u64::from_le_bytes(l8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes).map_err(io)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    if let Some(expected) = expect_vocab_hash {
        if expected != header.vocab_hash {
            return Err(Error::Checkpoint(format!(
                "vocabulary hash mismatch: checkpoint {} vs current {}",
                header.vocab_hash, expected
            )));
        }
    }

    let mut values: Vec<(String, Vec<f64>)> = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        let n = entry.rows * entry.cols;
        let mut buf = vec![0u8; n * 8];
        f.read_exact(&mut buf).map_err(io)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        values.push((entry.name.clone(), data));
    }

    let mut lookup: std::collections::HashMap<String, Vec<f64>> = values.into_iter().collect();
    let model = Model::from_parts(header.config, header.v_size, header.l_size, |name| {
        lookup
            .remove(name)
            .unwrap_or_else(|| panic!("checkpoint missing parameter {name}"))
    });
    Ok(Loaded {
        model,
        vocab_hash: header.vocab_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RunMode;
    use crate::tensor::Tape;

    fn small_model(seed: u64) -> Model {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let table: Vec<f64> = (0..13 * 6).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let config = ModelConfig {
            embed_dim: 6,
            hidden_dim: 4,
            encoder_layers: 2,
            dropout: 0.0,
            use_copy: true,
            attend_current_state: false,
        };
        Model::new(config, 10, 3, table, seed)
    }

    #[test]
    fn save_load_round_trip_preserves_behavior() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = small_model(31);
        save(&model, "hash123", &path).unwrap();
        let loaded = load(&path, Some("hash123")).unwrap();
        assert_eq!(loaded.vocab_hash, "hash123");

        let run = |m: &Model| {
            let tape = Tape::new();
            tape.scalar(m.sequence_loss(&tape, &[4, 5, 6], &[4, 11], 2, 3, &mut RunMode::Eval))
        };
        assert_eq!(run(&model), run(&loaded.model));
    }

    #[test]
    fn vocab_hash_mismatch_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&small_model(32), "aaa", &path).unwrap();
        let err = load(&path, Some("bbb")).unwrap_err();
        assert!(err.to_string().contains("hash mismatch"), "{err}");
    }

    #[test]
    fn garbage_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load(&path, None).is_err());
    }

    #[test]
    fn saved_bytes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save(&small_model(33), "h", &a).unwrap();
        save(&small_model(33), "h", &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
