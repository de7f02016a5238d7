//! Binary model checkpoints.
//!
//! Layout, all little-endian:
//!   magic "SAFC" | version u32 | dim_count u32 | dims u32* | omega f64 |
//!   seed u64 | iterations_done u64 | rounds_done u32 | active_count u64 |
//!   per weight layer: weights f64*, biases f64*, mask bits (LSB-first,
//!   padded to whole bytes)

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::TargetModel;
use crate::orchestrate::RunTrace;
use crate::sparse::SparseMask;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SAFC";
const VERSION: u32 = 1;

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> Result<()> {
        self.0.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.0.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.0.write_all(&v.to_le_bytes())?;
        Ok(())
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.0.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Checkpoint("truncated file".to_string())
            } else {
                Error::Io(e)
            }
        })?;
        Ok(buf)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &bit) in bits.iter().enumerate() {
        if bit {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect()
}

/// Write a checkpoint; `seed` and `rounds_done` come from the run that
/// produced the model.
pub fn save_checkpoint_parts(
    model: &TargetModel,
    seed: u64,
    rounds_done: u32,
    path: &Path,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = Writer(std::io::BufWriter::new(file));
    w.0.write_all(MAGIC)?;
    w.u32(VERSION)?;
    let dims = model.layer_dims();
    w.u32(dims.len() as u32)?;
    for &d in dims {
        w.u32(d as u32)?;
    }
    w.f64(model.mask().target_sparsity())?;
    w.u64(seed)?;
    w.u64(model.iterations_done())?;
    w.u32(rounds_done)?;
    w.u64(model.mask().active_count() as u64)?;
    for (k, (weights, biases)) in model.weights().iter().zip(model.biases()).enumerate() {
        for &v in weights.values() {
            w.f64(v)?;
        }
        for &v in biases.values() {
            w.f64(v)?;
        }
        w.0.write_all(&pack_bits(model.mask().layer(k)))?;
    }
    w.0.flush()?;
    Ok(())
}

/// Checkpoint the final model of a run, carrying the run's seed and
/// round counter.
pub fn save_checkpoint(model: &TargetModel, trace: Option<&RunTrace>, path: &Path) -> Result<()> {
    let (seed, rounds) = trace
        .map(|t| (t.seed, t.rounds.len() as u32))
        .unwrap_or((0, 0));
    save_checkpoint_parts(model, seed, rounds, path)
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub model: TargetModel,
    pub seed: u64,
    pub rounds_done: u32,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let file = std::fs::File::open(path)?;
    let mut r = Reader(std::io::BufReader::new(file));
    let magic: [u8; 4] = r.bytes()?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:02x?}, expected {:02x?}",
            magic, MAGIC
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let dim_count = r.u32()? as usize;
    if dim_count < 2 {
        return Err(Error::Checkpoint(format!("{dim_count} layer dims")));
    }
    let mut dims = Vec::with_capacity(dim_count);
    for _ in 0..dim_count {
        dims.push(r.u32()? as usize);
    }
    let omega = r.f64()?;
    let seed = r.u64()?;
    let iterations_done = r.u64()?;
    let rounds_done = r.u32()?;
    let active_header = r.u64()? as usize;

    let shapes: Vec<(usize, usize)> = dims.windows(2).map(|w| (w[0], w[1])).collect();
    let mut weights = Vec::with_capacity(shapes.len());
    let mut biases = Vec::with_capacity(shapes.len());
    let mut mask = SparseMask::dense(&shapes);
    mask.set_target_sparsity(omega);
    for (k, &(n_prev, n_cur)) in shapes.iter().enumerate() {
        let mut wv = Vec::with_capacity(n_prev * n_cur);
        for _ in 0..n_prev * n_cur {
            wv.push(r.f64()?);
        }
        weights.push(Tensor::new(vec![n_prev, n_cur], wv)?);
        let mut bv = Vec::with_capacity(n_cur);
        for _ in 0..n_cur {
            bv.push(r.f64()?);
        }
        biases.push(Tensor::new(vec![n_cur], bv)?);
        let n_bits = n_prev * n_cur;
        let mut packed = vec![0u8; n_bits.div_ceil(8)];
        r.0.read_exact(&mut packed)
            .map_err(|_| Error::Checkpoint("truncated mask".to_string()))?;
        *mask.layer_mut(k) = unpack_bits(&packed, n_bits);
    }
    if mask.active_count() != active_header {
        return Err(Error::Checkpoint(format!(
            "mask bit count {} disagrees with header active count {}",
            mask.active_count(),
            active_header
        )));
    }
    let model = TargetModel::from_parts(dims, weights, biases, mask, iterations_done)?;
    Ok(LoadedCheckpoint {
        model,
        seed,
        rounds_done,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::model::{build_mlp, TrainOptions};
    use crate::optim::OptimizerConfig;

    fn trained_model() -> TargetModel {
        let (train, _) = generate_synthetic(&SyntheticSpec::default(), 3).unwrap();
        let mut model = build_mlp(&[16, 24, 4], 0.2, 3).unwrap();
        model
            .train_rounds(
                &train,
                &TrainOptions {
                    iterations: 30,
                    batch_size: 32,
                    optimizer: OptimizerConfig::sgd(0.1),
                    seed: 3,
                },
            )
            .unwrap();
        model
    }

    #[test]
    fn round_trip_preserves_probe_outputs_bitwise() {
        let model = trained_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.safc");
        save_checkpoint_parts(&model, 42, 7, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.seed, 42);
        assert_eq!(loaded.rounds_done, 7);
        assert_eq!(loaded.model.iterations_done(), model.iterations_done());
        assert_eq!(loaded.model.mask_digest(), model.mask_digest());

        let probe: Vec<f64> = (0..16 * 8).map(|i| (i as f64 * 0.37).sin()).collect();
        let before = model.predict_probs(&probe, 8);
        let after = loaded.model.predict_probs(&probe, 8);
        assert_eq!(before, after);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let model = trained_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.safc");
        save_checkpoint_parts(&model, 1, 1, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(msg) if msg.contains("magic")));
    }

    #[test]
    fn truncation_is_rejected() {
        let model = trained_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.safc");
        save_checkpoint_parts(&model, 1, 1, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn header_active_count_matches_mask_popcount() {
        let model = trained_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.safc");
        save_checkpoint_parts(&model, 1, 1, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // magic(4) version(4) dim_count(4) dims(3*4) omega(8) seed(8)
        // iterations(8) rounds(4) -> active count at offset 52.
        let offset = 4 + 4 + 4 + 3 * 4 + 8 + 8 + 8 + 4;
        let active = u64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap());
        assert_eq!(active as usize, model.mask().active_count());
    }

    #[test]
    fn tampered_mask_bits_fail_the_header_audit() {
        let model = trained_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.safc");
        save_checkpoint_parts(&model, 1, 1, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
