//! On-disk datasets: one FWDS file per image or mask plus a JSON manifest.
//!
//! FWDS layout (little-endian): magic `FWDS`, `u32` C, H, W, then C*H*W
//! bytes, row-major CHW, each byte `round(value * 255)`.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use foodwaste_tensor::params::{derive_seed, mix64};
use foodwaste_tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deltanet::PairSample;
use crate::error::{Error, Result};
use crate::scenegen::{class_styles, gen_episode, ClassStyle, SceneConfig};
use crate::segnet::MaskSample;

pub const FWDS_MAGIC: &[u8; 4] = b"FWDS";
pub const MANIFEST: &str = "manifest.json";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_fwds(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = t.dims3()?;
    let mut out = Vec::with_capacity(16 + t.numel());
    out.extend_from_slice(FWDS_MAGIC);
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend(t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn decode_fwds(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 16 || &bytes[..4] != FWDS_MAGIC {
        return Err(bad("not an FWDS file".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let n = c.checked_mul(h).and_then(|x| x.checked_mul(w)).unwrap_or(usize::MAX);
    if n == 0 || bytes.len() - 16 != n {
        return Err(bad(format!("{c}x{h}x{w} header with {} payload bytes", bytes.len() - 16)));
    }
    let data = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::new(&[c, h, w], data)?)
}

pub fn write_fwds(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let bytes = encode_fwds(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_fwds(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_fwds(&bytes, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventEntry {
    pub seq: usize,
    pub class_id: usize,
    pub split: Split,
    pub before: String,
    pub after: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub bin_id: u64,
    pub split: Split,
    pub deposits: usize,
    pub events: Vec<EventEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub class_count: usize,
    pub image_size: usize,
    pub deposits_per_episode: usize,
    pub reflection_prob: f64,
    pub bag_prob: f64,
    pub split_ratio: [f64; 3],
    /// Classifier pairs per split; every pair also yields one mask sample.
    pub pairs: SplitCounts,
    pub class_styles: Vec<ClassStyle>,
    pub episodes: Vec<EpisodeEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub num_episodes: usize,
    pub deposits_per_episode: usize,
    pub scene: SceneConfig,
    pub split_ratio: [f64; 3],
}

impl GenConfig {
    pub fn new(seed: u64, num_episodes: usize, deposits_per_episode: usize, scene: SceneConfig) -> Self {
        Self {
            seed,
            num_episodes,
            deposits_per_episode,
            scene,
            split_ratio: [0.7, 0.2, 0.1],
        }
    }
}

/// Assigns whole episodes to splits. Episodes are ordered by a hash of
/// `(seed, bin_id)` and cut at the cumulative ratios, so split sizes follow
/// the ratio exactly up to rounding.
pub fn assign_splits(seed: u64, bin_ids: &[u64], ratio: [f64; 3]) -> Result<Vec<Split>> {
    let total: f64 = ratio.iter().sum();
    if ratio.iter().any(|r| !r.is_finite() || *r < 0.0) || total <= 0.0 {
        return Err(Error::Config(format!("bad split ratio {ratio:?}")));
    }
    let n = bin_ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (mix64(derive_seed(&[seed, bin_ids[i], 0])), i));
    let cut_train = ((ratio[0] / total) * n as f64).round() as usize;
    let cut_val = (((ratio[0] + ratio[1]) / total) * n as f64).round() as usize;
    let mut out = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < cut_train {
            Split::Train
        } else if rank < cut_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

fn event_paths(bin_id: u64, seq: usize) -> [String; 3] {
    let stem = format!("episodes/bin{bin_id:05}/seq{seq:03}");
    [format!("{stem}_before.fwds"), format!("{stem}_after.fwds"), format!("{stem}_mask.fwds")]
}

/// Generates `num_episodes` episodes (bin ids `0..num_episodes`) into
/// `out_dir`. Episodes are rendered in parallel; every file depends only on
/// its own episode, so the output does not depend on the worker count. The
/// manifest is written last, through a rename, so its presence marks a
/// complete dataset.
pub fn gen_dataset(cfg: &GenConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.scene.validate()?;
    if cfg.num_episodes == 0 || cfg.deposits_per_episode == 0 {
        return Err(Error::Config("need at least one episode and one deposit".into()));
    }
    let manifest_path = out_dir.join(MANIFEST);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    match fs::remove_file(&manifest_path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(Error::io(&manifest_path, e)),
        _ => {}
    }
    let bin_ids: Vec<u64> = (0..cfg.num_episodes as u64).collect();
    let splits = assign_splits(cfg.seed, &bin_ids, cfg.split_ratio)?;
    let episodes = bin_ids
        .par_iter()
        .zip(splits.par_iter())
        .map(|(&bin_id, &split)| {
            let episode = gen_episode(cfg.seed, bin_id, cfg.deposits_per_episode, &cfg.scene)?;
            let dir = out_dir.join(format!("episodes/bin{bin_id:05}"));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut events = Vec::with_capacity(episode.events.len());
            for ev in &episode.events {
                let [before, after, mask] = event_paths(bin_id, ev.seq);
                write_fwds(&ev.before, &out_dir.join(&before))?;
                write_fwds(&ev.after, &out_dir.join(&after))?;
                write_fwds(&ev.cumulative_mask, &out_dir.join(&mask))?;
                events.push(EventEntry {
                    seq: ev.seq,
                    class_id: ev.class_id,
                    split,
                    before,
                    after,
                    mask,
                });
            }
            Ok(EpisodeEntry {
                bin_id,
                split,
                deposits: events.len(),
                events,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let count = |s: Split| episodes.iter().filter(|e| e.split == s).map(|e| e.deposits).sum();
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        seed: cfg.seed,
        class_count: cfg.scene.class_count,
        image_size: cfg.scene.image_size,
        deposits_per_episode: cfg.deposits_per_episode,
        reflection_prob: cfg.scene.reflection_prob,
        bag_prob: cfg.scene.bag_prob,
        split_ratio: cfg.split_ratio,
        pairs: SplitCounts {
            train: count(Split::Train),
            val: count(Split::Val),
            test: count(Split::Test),
        },
        class_styles: class_styles().into_iter().take(cfg.scene.class_count).collect(),
        episodes,
    };
    write_json_atomic(&manifest, &manifest_path)?;
    Ok(manifest)
}

/// Pretty JSON with a trailing newline, written to a sibling temp file and
/// renamed into place.
pub fn write_json_atomic<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let write = || -> std::io::Result<()> {
        let mut f = BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer_pretty(&mut f, value)?;
        f.write_all(b"\n")?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A generated dataset opened from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        if manifest.version != DATASET_VERSION {
            return Err(Error::Format {
                path,
                msg: format!("unsupported dataset version {}", manifest.version),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn events(&self, split: Split) -> impl Iterator<Item = &EventEntry> {
        self.manifest
            .episodes
            .iter()
            .flat_map(|e| e.events.iter())
            .filter(move |ev| ev.split == split)
    }

    fn load(&self, rel: &str) -> Result<Tensor<f32>> {
        let path = self.root.join(rel);
        let t = read_fwds(&path)?;
        let s = self.manifest.image_size;
        let (_, h, w) = t.dims3()?;
        if (h, w) != (s, s) {
            return Err(Error::Format {
                path,
                msg: format!("{h}x{w} image in a {s}x{s} dataset"),
            });
        }
        Ok(t)
    }

    pub fn pairs(&self, split: Split) -> Result<Vec<PairSample>> {
        let events: Vec<&EventEntry> = self.events(split).collect();
        events
            .par_iter()
            .map(|ev| {
                Ok(PairSample {
                    before: self.load(&ev.before)?,
                    after: self.load(&ev.after)?,
                    label: ev.class_id,
                })
            })
            .collect()
    }

    /// Segmentation samples: each after-image with its cumulative mask.
    pub fn mask_samples(&self, split: Split) -> Result<Vec<MaskSample>> {
        let events: Vec<&EventEntry> = self.events(split).collect();
        events
            .par_iter()
            .map(|ev| MaskSample::new(self.load(&ev.after)?, self.load(&ev.mask)?))
            .collect()
    }
}
