//! Resampling sessions: a latent grid, its history, and the images they
//! generate. Images are never stored; they are regenerated from latents.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ssn_core::blocks::distortion_outside_set;
use ssn_core::image::encode_png;
use ssn_core::model::checkpoint;
use ssn_core::rng::{stream, tag};
use ssn_core::{compose_latent, BlockPartition, LatentGrid, Tensor, TrainState};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("unknown session {0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Internal(String),
}

pub type ServiceResult<T> = Result<T, ServiceError>;

fn internal(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Internal(e.to_string())
}

/// A frozen generator loaded from a checkpoint.
pub struct Model {
    pub state: TrainState,
}

impl Model {
    pub fn load(path: &Path) -> ServiceResult<Self> {
        let state = checkpoint::load(path)
            .map_err(|e| ServiceError::BadRequest(format!("cannot load checkpoint {}: {e}", path.display())))?;
        Ok(Model { state })
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        let g = &self.state.config.generator;
        (g.latent_rows, g.latent_cols, g.n_z)
    }

    pub fn render(&self, z: &LatentGrid) -> ServiceResult<Rendered> {
        let image = self.state.generate(&z.to_nchw()).map_err(internal)?;
        let png = encode_png(&image).map_err(internal)?;
        let digest = hex::encode(Sha256::digest(&png));
        Ok(Rendered { image, png, digest })
    }
}

pub struct Rendered {
    pub image: Tensor,
    pub png: Vec<u8>,
    /// SHA-256 of `png`, hex.
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    /// Latent before the step.
    pub latent: LatentGrid,
    /// 1-based `(row, col)` blocks the step resampled.
    pub targets: Vec<(usize, usize)>,
    /// Digest of the image generated from `latent`.
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub checkpoint: PathBuf,
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub revision: u64,
    pub current: LatentGrid,
    pub history: Vec<HistoryEntry>,
}

pub struct ResampleOutcome {
    pub rendered: Rendered,
    /// Per block, row-major: did any image value inside it change.
    pub changed: Vec<Vec<bool>>,
    /// Mean squared change outside the resampled blocks.
    pub distortion_outside: f64,
}

/// First latent of a session.
pub fn initial_latent(seed: u64, rows: usize, cols: usize, n_z: usize) -> LatentGrid {
    LatentGrid::sample(rows, cols, n_z, &mut stream(seed, &[tag("session")]), 0)
}

/// Fresh grid drawn for the resample applied at history depth `depth`.
/// Keyed by depth, so undoing and repeating a request replays the draw.
pub fn fresh_latent(seed: u64, depth: usize, rows: usize, cols: usize, n_z: usize) -> LatentGrid {
    LatentGrid::sample(rows, cols, n_z, &mut stream(seed, &[tag("resample"), depth as u64]), depth as u64 + 1)
}

impl Session {
    pub fn create(id: String, model: &Model, checkpoint: PathBuf, seed: u64, rows: usize, cols: usize) -> ServiceResult<(Self, Rendered)> {
        let (r, c, n_z) = model.grid();
        if (rows, cols) != (r, c) {
            return Err(ServiceError::BadRequest(format!(
                "grid {rows}x{cols} does not match the checkpoint's {r}x{c} latent"
            )));
        }
        let session = Session {
            id,
            checkpoint,
            seed,
            rows,
            cols,
            revision: 0,
            current: initial_latent(seed, rows, cols, n_z),
            history: Vec::new(),
        };
        let rendered = model.render(&session.current)?;
        Ok((session, rendered))
    }

    pub fn partition(&self, model: &Model) -> BlockPartition {
        model.state.config.generator.partition()
    }

    fn check_revision(&self, revision: Option<u64>) -> ServiceResult<()> {
        match revision {
            Some(r) if r != self.revision => Err(ServiceError::Conflict(format!(
                "stale revision {r}, session is at {}",
                self.revision
            ))),
            _ => Ok(()),
        }
    }

    /// 0-based block indices for 1-based coordinates.
    pub fn block_indices(&self, blocks: &[(usize, usize)]) -> ServiceResult<BTreeSet<usize>> {
        if blocks.is_empty() {
            return Err(ServiceError::BadRequest("no blocks to resample".into()));
        }
        let mut out = BTreeSet::new();
        for &(r, c) in blocks {
            if r == 0 || c == 0 || r > self.rows || c > self.cols {
                return Err(ServiceError::BadRequest(format!(
                    "block ({r},{c}) outside the {}x{} grid (coordinates start at 1)",
                    self.rows, self.cols
                )));
            }
            out.insert((r - 1) * self.cols + (c - 1));
        }
        Ok(out)
    }

    pub fn resample(&mut self, model: &Model, blocks: &[(usize, usize)], revision: Option<u64>) -> ServiceResult<ResampleOutcome> {
        self.check_revision(revision)?;
        let targets = self.block_indices(blocks)?;
        let (_, _, n_z) = model.grid();
        let fresh = fresh_latent(self.seed, self.history.len(), self.rows, self.cols, n_z);
        let next = compose_latent(&self.current, &fresh, &targets).map_err(internal)?;
        let before = model.render(&self.current)?;
        let after = model.render(&next)?;
        let partition = self.partition(model);
        let changed = block_changes(&before.image, &after.image, &partition, self.cols)?;
        let excluded: Vec<usize> = targets.iter().copied().collect();
        let distortion_outside = distortion_outside_set(&before.image, &after.image, &partition, &excluded).map_err(internal)?;
        let sorted: Vec<(usize, usize)> = targets.iter().map(|a| (a / self.cols + 1, a % self.cols + 1)).collect();
        self.history.push(HistoryEntry {
            latent: std::mem::replace(&mut self.current, next),
            targets: sorted,
            digest: before.digest,
        });
        self.revision += 1;
        Ok(ResampleOutcome {
            rendered: after,
            changed,
            distortion_outside,
        })
    }

    pub fn undo(&mut self, model: &Model, revision: Option<u64>) -> ServiceResult<Rendered> {
        self.check_revision(revision)?;
        let Some(entry) = self.history.last() else {
            return Err(ServiceError::BadRequest("nothing to undo".into()));
        };
        let rendered = model.render(&entry.latent)?;
        if rendered.digest != entry.digest {
            return Err(ServiceError::Internal("regenerated image does not match its recorded digest".into()));
        }
        let entry = self.history.pop().expect("checked above");
        self.current = entry.latent;
        self.revision += 1;
        Ok(rendered)
    }
}

fn block_changes(a: &Tensor, b: &Tensor, p: &BlockPartition, cols: usize) -> ServiceResult<Vec<Vec<bool>>> {
    let mut out = vec![vec![false; cols]; p.n_blocks() / cols];
    for blk in 0..p.n_blocks() {
        let x = ssn_core::blocks::extract_block(a, p, blk).map_err(internal)?;
        let y = ssn_core::blocks::extract_block(b, p, blk).map_err(internal)?;
        out[blk / cols][blk % cols] = x.iter().zip(&y).any(|(u, v)| u.to_bits() != v.to_bits());
    }
    Ok(out)
}

/// Sessions in memory, mirrored as JSON files in `dir` when set, plus the
/// models they use.
pub struct SessionStore {
    dir: Option<PathBuf>,
    sessions: Mutex<HashMap<String, Session>>,
    models: Mutex<HashMap<PathBuf, Arc<Model>>>,
}

impl SessionStore {
    pub fn new(dir: Option<PathBuf>) -> std::io::Result<Self> {
        if let Some(d) = &dir {
            std::fs::create_dir_all(d)?;
        }
        Ok(SessionStore {
            dir,
            sessions: Mutex::new(HashMap::new()),
            models: Mutex::new(HashMap::new()),
        })
    }

    pub fn model(&self, path: &Path) -> ServiceResult<Arc<Model>> {
        let mut models = self.models.lock().map_err(internal)?;
        if let Some(m) = models.get(path) {
            return Ok(m.clone());
        }
        let m = Arc::new(Model::load(path)?);
        models.insert(path.to_path_buf(), m.clone());
        Ok(m)
    }

    fn path_of(&self, id: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{id}.json")))
    }

    fn persist(&self, s: &Session) -> ServiceResult<()> {
        let Some(path) = self.path_of(&s.id) else { return Ok(()) };
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec(s).map_err(internal)?).map_err(internal)?;
        std::fs::rename(&tmp, &path).map_err(internal)
    }

    fn valid_id(id: &str) -> bool {
        !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
    }

    /// Run `f` on the session with the given id, loading it from disk if
    /// needed. Changes are written back when `f` succeeds and the revision
    /// moved.
    pub fn with_session<T>(&self, id: &str, f: impl FnOnce(&mut Session) -> ServiceResult<T>) -> ServiceResult<T> {
        if !Self::valid_id(id) {
            return Err(ServiceError::NotFound(id.to_string()));
        }
        let mut sessions = self.sessions.lock().map_err(internal)?;
        if !sessions.contains_key(id) {
            let loaded = match self.path_of(id) {
                Some(p) if p.exists() => {
                    let text = std::fs::read(&p).map_err(internal)?;
                    serde_json::from_slice::<Session>(&text).map_err(internal)?
                }
                _ => return Err(ServiceError::NotFound(id.to_string())),
            };
            sessions.insert(id.to_string(), loaded);
        }
        let s = sessions.get_mut(id).expect("inserted above");
        let before = s.revision;
        let mut work = s.clone();
        let out = f(&mut work)?;
        if work.revision != before {
            self.persist(&work)?;
        }
        *s = work;
        Ok(out)
    }

    pub fn create(&self, checkpoint: &Path, seed: u64, grid: Option<(usize, usize)>) -> ServiceResult<(Session, Rendered)> {
        let model = self.model(checkpoint)?;
        let (r, c, _) = model.grid();
        let (rows, cols) = grid.unwrap_or((r, c));
        let id = uuid::Uuid::new_v4().to_string();
        let (s, rendered) = Session::create(id.clone(), &model, checkpoint.to_path_buf(), seed, rows, cols)?;
        self.persist(&s)?;
        self.sessions.lock().map_err(internal)?.insert(id, s.clone());
        Ok((s, rendered))
    }
}
