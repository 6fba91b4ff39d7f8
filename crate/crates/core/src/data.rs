//! Sequence datasets: PAMAP2 ingestion, transient-ratio sequence extraction,
//! train/validation/test splits, and a synthetic generator with
//! non-uniform information content.

use crate::architecture::derive_seed;
use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

/// Columns per PAMAP2 row: timestamp, activity id, heart rate, then three
/// inertial units of 17 columns each.
pub const PAMAP2_COLUMNS: usize = 54;
/// Sensor features per record (every column after the activity id).
pub const PAMAP2_FEATURES: usize = 52;
/// Activity id of transient states.
pub const TRANSIENT: i64 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub timestamp: f64,
    pub activity_id: i64,
    pub subject: u32,
    pub features: Vec<f64>,
}

impl Record {
    pub fn is_transient(&self) -> bool {
        self.activity_id == TRANSIENT
    }
}

fn subject_from_path(path: &Path, fallback: u32) -> u32 {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(|s| s.chars().filter(char::is_ascii_digit).collect::<String>())
        .and_then(|d| d.parse().ok())
        .unwrap_or(fallback)
}

/// Loads PAMAP2 records from a single subject file or from every `*.dat`
/// file in a directory (sorted by name). Rows holding any `NaN` are dropped.
pub fn load_pamap2(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        return parse_pamap2_file(path, subject_from_path(path, 0));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "dat"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no .dat subject files"),
        ));
    }
    let mut out = Vec::new();
    for (k, f) in files.iter().enumerate() {
        out.extend(parse_pamap2_file(f, subject_from_path(f, k as u32))?);
    }
    Ok(out)
}

/// Parses one whitespace-separated subject file.
pub fn parse_pamap2_file(path: &Path, subject: u32) -> Result<Vec<Record>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut values = Vec::with_capacity(PAMAP2_COLUMNS);
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        values.clear();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("not a number: `{tok}`"),
            })?;
            values.push(v);
        }
        if values.len() != PAMAP2_COLUMNS {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("expected {PAMAP2_COLUMNS} columns, found {}", values.len()),
            });
        }
        if values.iter().any(|v| v.is_nan()) {
            continue;
        }
        out.push(Record {
            timestamp: values[0],
            activity_id: values[1] as i64,
            subject,
            features: values[2..].to_vec(),
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 1,
            Split::Validation => 2,
            Split::Test => 3,
        }
    }

    fn from_code(c: u8) -> Result<Option<Self>> {
        match c {
            0 => Ok(None),
            1 => Ok(Some(Split::Train)),
            2 => Ok(Some(Split::Validation)),
            3 => Ok(Some(Split::Test)),
            _ => Err(Error::Format(format!("unknown split code {c}"))),
        }
    }
}

/// One fixed-length sequence: `steps × input_dim` features and a dense label per step.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub subject: u32,
    pub timestamps: Vec<f64>,
    /// Row-major `steps × input_dim`.
    pub features: Vec<f64>,
    pub labels: Vec<u32>,
}

impl Sequence {
    pub fn steps(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// `pamap2` or `synthetic`.
    pub source: String,
    pub transient_ratio: f64,
    pub steps: usize,
    pub seed: u64,
    pub input_dim: usize,
    /// Original activity id of each dense label; index 0 is transient.
    pub classes: Vec<i64>,
}

impl DatasetMeta {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub meta: DatasetMeta,
    pub sequences: Vec<Sequence>,
    /// One entry per sequence once [`split_dataset`] has run, otherwise empty.
    pub splits: Vec<Split>,
}

impl SequenceDataset {
    pub fn is_split(&self) -> bool {
        !self.sequences.is_empty() && self.splits.len() == self.sequences.len()
    }

    pub fn split_indices(&self, which: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == which)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_counts(&self) -> (usize, usize, usize) {
        (
            self.split_indices(Split::Train).len(),
            self.split_indices(Split::Validation).len(),
            self.split_indices(Split::Test).len(),
        )
    }

    /// Fraction of steps labeled transient.
    pub fn transient_fraction(&self) -> f64 {
        let total: usize = self.sequences.iter().map(Sequence::steps).sum();
        let transient: usize = self
            .sequences
            .iter()
            .map(|s| s.labels.iter().filter(|&&l| l == 0).count())
            .sum();
        transient as f64 / total.max(1) as f64
    }
}

fn transient_count(r: f64, n: usize) -> usize {
    // guards against 0.29 * 100 = 28.999...
    ((r * n as f64) + 1e-9).floor() as usize
}

fn check_ratio(r: f64) -> Result<()> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Config(format!("transient ratio must lie in (0, 1), got {r}")));
    }
    Ok(())
}

/// Builds fixed-length sequences with `⌊r·n⌋` transient and `n − ⌊r·n⌋`
/// non-transient records each.
///
/// Per subject, both pools are shuffled with a seeded generator and consumed
/// in chunks; each chunk pair is merged and sorted by timestamp. Sequences
/// never span subjects. Subjects that cannot fill a single sequence are
/// skipped with a warning.
pub fn extract_sequences(records: &[Record], r: f64, n: usize, seed: u64) -> Result<SequenceDataset> {
    check_ratio(r)?;
    if n == 0 {
        return Err(Error::Config("sequence length must be positive".into()));
    }
    let input_dim = records.first().map_or(PAMAP2_FEATURES, |r| r.features.len());
    let mut ids: Vec<i64> = records.iter().map(|r| r.activity_id).collect();
    ids.push(TRANSIENT);
    ids.sort_unstable();
    ids.dedup();
    ids.retain(|&a| a != TRANSIENT);
    let mut classes = vec![TRANSIENT];
    classes.extend(ids);
    let dense: BTreeMap<i64, u32> = classes.iter().enumerate().map(|(k, &a)| (a, k as u32)).collect();

    let mut by_subject: BTreeMap<u32, (Vec<&Record>, Vec<&Record>)> = BTreeMap::new();
    for rec in records {
        if rec.features.len() != input_dim {
            return Err(Error::Dimension {
                op: "record features",
                left: (input_dim, 1),
                right: (rec.features.len(), 1),
            });
        }
        let entry = by_subject.entry(rec.subject).or_default();
        if rec.is_transient() {
            entry.0.push(rec);
        } else {
            entry.1.push(rec);
        }
    }

    let n_transient = transient_count(r, n);
    let n_active = n - n_transient;
    let mut sequences = Vec::new();
    for (subject, (mut transient, mut active)) in by_subject {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, subject as u64));
        transient.shuffle(&mut rng);
        active.shuffle(&mut rng);
        let mut produced = 0;
        let (mut ti, mut ai) = (0, 0);
        while transient.len() - ti >= n_transient && active.len() - ai >= n_active {
            let mut chunk: Vec<&Record> = transient[ti..ti + n_transient]
                .iter()
                .chain(&active[ai..ai + n_active])
                .copied()
                .collect();
            ti += n_transient;
            ai += n_active;
            chunk.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
            sequences.push(Sequence {
                subject,
                timestamps: chunk.iter().map(|r| r.timestamp).collect(),
                features: chunk.iter().flat_map(|r| r.features.iter().copied()).collect(),
                labels: chunk.iter().map(|r| dense[&r.activity_id]).collect(),
            });
            produced += 1;
            if n_transient == 0 && n_active == 0 {
                break;
            }
        }
        if produced == 0 {
            log::warn!(
                "subject {subject}: {} transient / {} active records cannot fill a sequence of {n} at r = {r}; skipped",
                transient.len(),
                active.len()
            );
        }
    }
    if sequences.is_empty() {
        return Err(Error::Empty("sequence set (no subject has enough records)"));
    }
    Ok(SequenceDataset {
        meta: DatasetMeta {
            source: "pamap2".into(),
            transient_ratio: r,
            steps: n,
            seed,
            input_dim,
            classes,
        },
        sequences,
        splits: Vec::new(),
    })
}

/// Shuffled sequence-level split, 80 / 10 / 10. Validation and test each get
/// `round(N / 10)` sequences and training keeps the rest.
pub fn split_dataset(mut dataset: SequenceDataset, seed: u64) -> Result<SequenceDataset> {
    let total = dataset.sequences.len();
    if total < 10 {
        return Err(Error::Config(format!("need at least 10 sequences to split, have {total}")));
    }
    let n_val = (total as f64 / 10.0).round() as usize;
    let n_test = n_val;
    let n_train = total - n_val - n_test;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5EED)));
    let mut splits = vec![Split::Train; total];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    dataset.splits = splits;
    Ok(dataset)
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub transient_ratio: f64,
    pub steps: usize,
    pub sequences: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            transient_ratio: 0.5,
            steps: 100,
            sequences: 300,
            input_dim: 8,
            num_classes: 4,
            seed: 1,
        }
    }
}

/// Mean length of an active segment.
pub const SYNTH_SEGMENT_MEAN: f64 = 8.0;
const SYNTH_TRANSIENT_SD: f64 = 0.1;
const SYNTH_ACTIVE_SD: f64 = 0.05;
const SYNTH_MIXING_SEED: u64 = 0x00AD_A5E9;

/// Synthetic regime-switching sequences.
///
/// Each sequence holds exactly `⌊r·n⌋` transient steps (label 0, small
/// isotropic noise) at uniformly random positions. The remaining steps, in
/// order, form active segments of geometric length with mean
/// [`SYNTH_SEGMENT_MEAN`] active steps, so transient steps interrupt
/// segments as well as separating them. In a segment of class `c` a latent
/// unit vector rotates by `π·c / K` per active step from a random starting
/// angle and is mixed into the feature space by a fixed linear map. A
/// single frame is therefore uninformative: the class is only recoverable
/// from the rotation between consecutive active frames, a bilinear function
/// of the current and previous active features. Across an interruption
/// that previous frame has to be carried in the recurrent state.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SequenceDataset> {
    check_ratio(cfg.transient_ratio)?;
    if cfg.steps == 0 || cfg.sequences == 0 {
        return Err(Error::Config("steps and sequences must be positive".into()));
    }
    if cfg.num_classes < 2 || cfg.input_dim < 2 {
        return Err(Error::Config("synthetic data needs num_classes >= 2 and input_dim >= 2".into()));
    }
    let k = cfg.num_classes;
    let d = cfg.input_dim;
    let mut mix_rng = ChaCha8Rng::seed_from_u64(SYNTH_MIXING_SEED);
    let mixing = mixing_matrix(d, &mut mix_rng);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seg_len = Geometric::new(1.0 / SYNTH_SEGMENT_MEAN).expect("valid geometric");
    let transient_noise = Normal::new(0.0, SYNTH_TRANSIENT_SD).expect("valid normal");
    let active_noise = Normal::new(0.0, SYNTH_ACTIVE_SD).expect("valid normal");
    let n = cfg.steps;
    let n_transient = transient_count(cfg.transient_ratio, n);

    let mut sequences = Vec::with_capacity(cfg.sequences);
    for _ in 0..cfg.sequences {
        let mut transient = vec![false; n];
        transient[..n_transient].fill(true);
        transient.shuffle(&mut rng);

        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        // (class, angular speed, current angle, active steps left)
        let mut segment = (0usize, 0.0f64, 0.0f64, 0usize);
        for &is_transient in &transient {
            if is_transient {
                features.extend((0..d).map(|_| transient_noise.sample(&mut rng)));
                labels.push(0);
                continue;
            }
            if segment.3 == 0 {
                let class = rng.random_range(1..k);
                let omega = std::f64::consts::PI * class as f64 / k as f64;
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                segment = (class, omega, phase, seg_len.sample(&mut rng) as usize + 1);
            }
            let (sin, cos) = segment.2.sin_cos();
            for row in &mixing {
                features.push(row[0] * cos + row[1] * sin + active_noise.sample(&mut rng));
            }
            labels.push(segment.0 as u32);
            segment.2 += segment.1;
            segment.3 -= 1;
        }
        sequences.push(Sequence {
            subject: 0,
            timestamps: (0..n).map(|t| t as f64).collect(),
            features,
            labels,
        });
    }
    Ok(SequenceDataset {
        meta: DatasetMeta {
            source: "synthetic".into(),
            transient_ratio: cfg.transient_ratio,
            steps: n,
            seed: cfg.seed,
            input_dim: d,
            classes: (0..k as i64).collect(),
        },
        sequences,
        splits: Vec::new(),
    })
}

/// `d × 2` map with orthonormal columns scaled to feature norm `sqrt(d / 2)`.
fn mixing_matrix(d: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut a: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
    let mut b: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let na = norm(&a);
    a.iter_mut().for_each(|x| *x /= na);
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    b.iter_mut().zip(&a).for_each(|(y, x)| *y -= dot * x);
    let nb = norm(&b);
    b.iter_mut().for_each(|x| *x /= nb);
    let scale = (d as f64 / 2.0).sqrt();
    a.iter().zip(&b).map(|(&x, &y)| [x * scale, y * scale]).collect()
}

/// Per-feature mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Statistics over every step of the training split.
    pub fn fit(dataset: &SequenceDataset) -> Result<Self> {
        let train = dataset.split_indices(Split::Train);
        if train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let d = dataset.meta.input_dim;
        let mut mean = vec![0.0; d];
        let mut count = 0usize;
        for &i in &train {
            for row in dataset.sequences[i].features.chunks_exact(d) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
                count += 1;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; d];
        for &i in &train {
            for row in dataset.sequences[i].features.chunks_exact(d) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, dataset: &mut SequenceDataset) {
        let d = self.mean.len();
        for seq in &mut dataset.sequences {
            for row in seq.features.chunks_exact_mut(d) {
                for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                    *v = (*v - m) / s;
                }
            }
        }
    }
}

const CACHE_MAGIC: &[u8; 8] = b"ADSQDSET";
pub const CACHE_VERSION: u32 = 1;

/// Writes the binary dataset cache (layout documented in `docs/formats.md`).
pub fn write_cache(dataset: &SequenceDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode_cache(dataset, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn encode_cache(ds: &SequenceDataset, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(CACHE_MAGIC)?;
    w.write_u32::<LittleEndian>(CACHE_VERSION)?;
    let meta = serde_json::to_vec(&ds.meta)?;
    w.write_u32::<LittleEndian>(meta.len() as u32)?;
    w.write_all(&meta)?;
    w.write_u32::<LittleEndian>(ds.sequences.len() as u32)?;
    for (i, seq) in ds.sequences.iter().enumerate() {
        w.write_u32::<LittleEndian>(seq.subject)?;
        w.write_u8(ds.splits.get(i).map_or(0, |s| s.code()))?;
        w.write_u32::<LittleEndian>(seq.steps() as u32)?;
        for &t in &seq.timestamps {
            w.write_f64::<LittleEndian>(t)?;
        }
        for &v in &seq.features {
            w.write_f64::<LittleEndian>(v)?;
        }
        for &l in &seq.labels {
            w.write_u32::<LittleEndian>(l)?;
        }
    }
    Ok(())
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<SequenceDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_cache(&mut BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

fn decode_cache(r: &mut impl Read) -> Result<SequenceDataset> {
    let io = |e| Error::io("<cache>", e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Format("not a dataset cache".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != CACHE_VERSION {
        return Err(Error::Format(format!("unsupported dataset cache version {version}")));
    }
    let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(io)?;
    let meta: DatasetMeta = serde_json::from_slice(&buf)?;
    let count = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut sequences = Vec::with_capacity(count);
    let mut splits = Vec::with_capacity(count);
    for _ in 0..count {
        let subject = r.read_u32::<LittleEndian>().map_err(io)?;
        splits.push(Split::from_code(r.read_u8().map_err(io)?)?);
        let steps = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut timestamps = vec![0.0; steps];
        r.read_f64_into::<LittleEndian>(&mut timestamps).map_err(io)?;
        let mut features = vec![0.0; steps * meta.input_dim];
        r.read_f64_into::<LittleEndian>(&mut features).map_err(io)?;
        let mut labels = vec![0u32; steps];
        r.read_u32_into::<LittleEndian>(&mut labels).map_err(io)?;
        sequences.push(Sequence {
            subject,
            timestamps,
            features,
            labels,
        });
    }
    let splits = if splits.iter().all(Option::is_some) {
        splits.into_iter().flatten().collect()
    } else if splits.iter().all(Option::is_none) {
        Vec::new()
    } else {
        return Err(Error::Format("cache has a partial split assignment".into()));
    };
    Ok(SequenceDataset {
        meta,
        sequences,
        splits,
    })
}
