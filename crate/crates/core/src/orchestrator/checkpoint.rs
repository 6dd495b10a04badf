//! Binary checkpoints.
//!
//! Layout (little endian):
//! `magic[8] | version u32 | config_hash[32] | body_len u64 | body | sha256[32]`
//! where the trailing digest covers every preceding byte.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::RunState;
use crate::objectives::{Adam, ExpertIterationState};
use crate::policy::{ConjecturerParams, ParamTable, Rollout, SolverParams};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"SGSCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER_LEN: usize = 8 + 4 + 32 + 8;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint was written by a different config or dataset")]
    ConfigMismatch,
    #[error("checkpoint I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn bool(&mut self, v: bool) {
        self.0.push(u8::from(v));
    }
    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, values: &[f64]) {
        self.len(values.len());
        values.iter().for_each(|&v| self.f64(v));
    }
    fn usizes(&mut self, values: &[usize]) {
        self.len(values.len());
        values.iter().for_each(|&v| self.len(v));
    }
    fn table(&mut self, t: &ParamTable) {
        self.len(t.rows());
        self.len(t.cols());
        self.f64s(t.as_slice());
    }
    fn adam(&mut self, a: &Adam) {
        self.u64(a.steps);
        self.f64s(&a.first);
        self.f64s(&a.second);
    }
    fn rollout(&mut self, r: &Rollout) {
        self.str(&r.problem_id);
        self.usizes(&r.steps);
        self.f64s(&r.logprobs);
        self.f64s(&r.entropies);
        self.bool(r.verified);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

type Result<T> = std::result::Result<T, CheckpointError>;

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt("unexpected end of body"))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    /// A count of items at least `item_size` bytes each; bounded by what is left.
    fn len(&mut self, item_size: usize) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.bytes.len() - self.at) as u64;
        if n.saturating_mul(item_size.max(1) as u64) > left {
            return Err(corrupt(format!("length {n} exceeds remaining {left} bytes")));
        }
        Ok(n as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn bool(&mut self) -> Result<bool> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(corrupt(format!("bad boolean byte {b}"))),
        }
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("string is not UTF-8"))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len(8)?;
        (0..n)
            .map(|_| usize::try_from(self.u64()?).map_err(|_| corrupt("index overflow")))
            .collect()
    }
    fn table(&mut self) -> Result<ParamTable> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let values = self.f64s()?;
        if rows.checked_mul(cols) != Some(values.len()) {
            return Err(corrupt("table shape does not match its values"));
        }
        let mut table = ParamTable::zeros(rows, cols);
        table.as_mut_slice().copy_from_slice(&values);
        Ok(table)
    }
    fn adam(&mut self, len: usize) -> Result<Adam> {
        let steps = self.u64()?;
        let first = self.f64s()?;
        let second = self.f64s()?;
        if first.len() != len || second.len() != len {
            return Err(corrupt("optimizer moments do not match parameter count"));
        }
        Ok(Adam { first, second, steps })
    }
    fn rollout(&mut self) -> Result<Rollout> {
        Ok(Rollout {
            problem_id: self.str()?,
            steps: self.usizes()?,
            logprobs: self.f64s()?,
            entropies: self.f64s()?,
            verified: self.bool()?,
        })
    }
}

fn encode_body(state: &RunState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u64(state.iteration);
    w.u64(state.generations);
    w.len(state.solved.len());
    state.solved.iter().for_each(|id| w.str(id));
    w.table(&state.solver.table);
    w.table(&state.conjecturer.target_head);
    w.table(&state.conjecturer.budget_head);
    w.adam(&state.solver_adam);
    w.adam(&state.conjecturer_adam);
    w.0.extend_from_slice(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.0.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    w.len(state.ei.solve_counts.len());
    for (id, n) in &state.ei.solve_counts {
        w.str(id);
        w.u32(*n);
    }
    w.len(state.ei.proofs.len());
    for (iter, rollout) in &state.ei.proofs {
        w.u64(*iter);
        w.rollout(rollout);
    }
    w.0
}

fn decode_body(body: &[u8]) -> Result<RunState> {
    let mut r = Reader { bytes: body, at: 0 };
    let iteration = r.u64()?;
    let generations = r.u64()?;
    let n_solved = r.len(8)?;
    let mut solved = BTreeSet::new();
    for _ in 0..n_solved {
        solved.insert(r.str()?);
    }
    let solver = SolverParams::from_table(r.table()?).map_err(|e| corrupt(e.to_string()))?;
    let target_head = r.table()?;
    let budget_head = r.table()?;
    let conjecturer = ConjecturerParams::from_tables(target_head, budget_head).map_err(|e| corrupt(e.to_string()))?;
    let solver_adam = r.adam(solver.table.as_slice().len())?;
    let conjecturer_adam = r.adam(conjecturer.len())?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let n_counts = r.len(12)?;
    let mut solve_counts = BTreeMap::new();
    for _ in 0..n_counts {
        let id = r.str()?;
        solve_counts.insert(id, r.u32()?);
    }
    let n_proofs = r.len(8)?;
    let mut proofs = Vec::with_capacity(n_proofs);
    for _ in 0..n_proofs {
        let iter = r.u64()?;
        proofs.push((iter, r.rollout()?));
    }
    if r.at != body.len() {
        return Err(corrupt("trailing bytes after state"));
    }
    Ok(RunState {
        iteration,
        solved,
        solver,
        conjecturer,
        solver_adam,
        conjecturer_adam,
        generations,
        rng,
        ei: ExpertIterationState { solve_counts, proofs },
    })
}

pub fn encode_checkpoint(state: &RunState, config_hash: &[u8; 32]) -> Vec<u8> {
    let body = encode_body(state);
    let mut out = Vec::with_capacity(HEADER_LEN + body.len() + DIGEST_LEN);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(config_hash);
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    let digest: [u8; 32] = Sha256::digest(&out).into();
    out.extend_from_slice(&digest);
    out
}

/// Decodes a checkpoint; `expected_hash` of `None` skips the config check.
pub fn decode_checkpoint(bytes: &[u8], expected_hash: Option<&[u8; 32]>) -> Result<RunState> {
    if bytes.len() < 8 || bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER_LEN + DIGEST_LEN {
        return Err(corrupt("file shorter than header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let body_len = u64::from_le_bytes(bytes[44..52].try_into().expect("8 bytes"));
    if body_len != (bytes.len() - HEADER_LEN - DIGEST_LEN) as u64 {
        return Err(corrupt(format!(
            "declared body of {body_len} bytes, file holds {}",
            bytes.len() - HEADER_LEN - DIGEST_LEN
        )));
    }
    let (content, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(content).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    if let Some(expected) = expected_hash {
        if bytes[12..44] != expected[..] {
            return Err(CheckpointError::ConfigMismatch);
        }
    }
    decode_body(&content[HEADER_LEN..])
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn checkpoint_save(state: &RunState, config_hash: &[u8; 32], path: &Path) -> Result<()> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(&encode_checkpoint(state, config_hash)).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn checkpoint_load(path: &Path, config_hash: &[u8; 32]) -> Result<RunState> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes, Some(config_hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::DatasetConfig;
    use crate::orchestrator::{DatasetRef, Mode, RunConfig};
    use rand::Rng;

    fn state() -> RunState {
        let mut config = RunConfig::new(Mode::RlEi, DatasetRef::Generate(DatasetConfig::default()), 1, 5);
        config.solver_hash_bits = 4;
        config.conjecturer_hash_bits = 3;
        let mut s = RunState::new(&config);
        s.iteration = 3;
        s.generations = 77;
        s.solved.insert("p00001".into());
        s.solver.table.as_mut_slice()[5] = -0.25;
        s.solver_adam.first[2] = 1e-300;
        s.solver_adam.steps = 3;
        let _: u64 = s.rng.gen();
        s.ei.solve_counts.insert("p00001".into(), 4);
        s.ei.proofs.push((
            2,
            Rollout {
                problem_id: "p00001".into(),
                steps: vec![0, 1],
                logprobs: vec![-0.5, -0.25, -0.1],
                entropies: vec![1.0, 0.5, 0.25],
                verified: true,
            },
        ));
        s
    }

    #[test]
    fn round_trip_is_identity() {
        let s = state();
        let bytes = encode_checkpoint(&s, &[7; 32]);
        let back = decode_checkpoint(&bytes, Some(&[7; 32])).unwrap();
        assert_eq!(back, s);
        let mut a = s.rng.clone();
        let mut b = back.rng.clone();
        assert_eq!(a.gen::<u64>(), b.gen::<u64>());
    }

    #[test]
    fn truncation_and_bitflips_are_corruption() {
        let bytes = encode_checkpoint(&state(), &[7; 32]);
        for cut in [bytes.len() - 1, bytes.len() / 2, 60, 20] {
            assert!(matches!(
                decode_checkpoint(&bytes[..cut], None),
                Err(CheckpointError::Corrupt(_))
            ));
        }
        let mut flipped = bytes.clone();
        flipped[HEADER_LEN + 3] ^= 1;
        assert!(matches!(
            decode_checkpoint(&flipped, None),
            Err(CheckpointError::Corrupt(_))
        ));
        assert!(matches!(
            decode_checkpoint(b"nope", None),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn version_and_config_checks() {
        let mut bytes = encode_checkpoint(&state(), &[7; 32]);
        assert!(matches!(
            decode_checkpoint(&bytes, Some(&[8; 32])),
            Err(CheckpointError::ConfigMismatch)
        ));
        bytes[8] = 9;
        assert!(matches!(
            decode_checkpoint(&bytes, None),
            Err(CheckpointError::Version { found: 9 })
        ));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint-3.bin");
        let s = state();
        checkpoint_save(&s, &[1; 32], &path).unwrap();
        assert_eq!(checkpoint_load(&path, &[1; 32]).unwrap(), s);
    }
}
