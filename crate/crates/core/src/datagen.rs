//! Dataset layout, source activity detection and the random-mixing training sampler.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use ndarray::{Array2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{read_wav, read_wav_range, wav_info, write_wav};
use crate::bandscheme::Source;
use crate::error::{Error, Result};
use crate::inference::segment_bounds;
use crate::scalar::Scalar;
use crate::spectral::Waveform;

/// Canonical validation songs, held out from the train folder.
pub const VALIDATION_SONGS: &str = include_str!("../data/musdb_validation.txt");

pub fn validation_song_names() -> Vec<&'static str> {
    VALIDATION_SONGS
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train, valid or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Song {
    pub id: String,
    pub dir: PathBuf,
}

impl Song {
    pub fn stem_path(&self, source: Source) -> PathBuf {
        self.dir.join(format!("{source}.wav"))
    }

    pub fn mixture_path(&self) -> PathBuf {
        self.dir.join("mixture.wav")
    }
}

/// Songs of one split, sorted by id.
///
/// Layout: `<root>/train/<song>/{vocals,bass,drums,other,mixture}.wav` and `<root>/test/<song>/...`.
/// Validation songs come from `<root>/valid/` when it exists, otherwise from the train folder
/// using the canonical validation list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackSet {
    pub split: Split,
    pub songs: Vec<Song>,
}

fn list_song_dirs(dir: &Path) -> Result<Vec<Song>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut songs = Vec::new();
    for e in entries {
        let e = e.map_err(|err| Error::io(dir, err))?;
        if e.path().is_dir() {
            songs.push(Song {
                id: e.file_name().to_string_lossy().into_owned(),
                dir: e.path(),
            });
        }
    }
    songs.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(songs)
}

impl TrackSet {
    pub fn load(root: &Path, split: Split) -> Result<Self> {
        let valid_dir = root.join("valid");
        let songs = match split {
            Split::Test => list_song_dirs(&root.join("test"))?,
            Split::Valid if valid_dir.is_dir() => list_song_dirs(&valid_dir)?,
            Split::Train | Split::Valid => {
                let names: BTreeSet<&str> = if valid_dir.is_dir() {
                    BTreeSet::new()
                } else {
                    validation_song_names().into_iter().collect()
                };
                list_song_dirs(&root.join("train"))?
                    .into_iter()
                    .filter(|s| names.contains(s.id.as_str()) == (split == Split::Valid))
                    .collect()
            }
        };
        let set = Self { split, songs };
        set.check_files()?;
        let expected = match split {
            Split::Train => 86,
            Split::Valid => 14,
            Split::Test => 50,
        };
        if set.songs.len() != expected {
            info!("{:?} split has {} songs (full dataset has {expected})", split, set.songs.len());
        }
        Ok(set)
    }

    fn check_files(&self) -> Result<()> {
        for song in &self.songs {
            for src in Source::ALL {
                let p = song.stem_path(src);
                if !p.is_file() {
                    return Err(Error::Data(format!("missing stem {}", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.songs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.songs.is_empty()
    }
}

/// Random access to stems by (song, source).
pub trait StemStore<T: Scalar>: Sync {
    fn n_songs(&self) -> usize;
    fn song_id(&self, song: usize) -> &str;
    fn sample_rate(&self) -> u32;
    fn stem_len(&self, song: usize, source: Source) -> usize;
    fn read(&self, song: usize, source: Source, start: usize, len: usize) -> Result<Waveform<T>>;

    fn stem(&self, song: usize, source: Source) -> Result<Waveform<T>> {
        self.read(song, source, 0, self.stem_len(song, source))
    }
}

/// Stems held in memory.
#[derive(Debug, Clone)]
pub struct MemoryStore<T> {
    ids: Vec<String>,
    stems: Vec<[Waveform<T>; 4]>,
    sample_rate: u32,
}

impl<T: Scalar> MemoryStore<T> {
    pub fn new(songs: Vec<(String, [Waveform<T>; 4])>) -> Result<Self> {
        let sample_rate = songs
            .first()
            .map(|(_, s)| s[0].sample_rate)
            .ok_or_else(|| Error::Data("no songs".into()))?;
        for (id, stems) in &songs {
            for w in stems {
                w.validate()?;
                if w.sample_rate != sample_rate || w.channels() != stems[0].channels() {
                    return Err(Error::Data(format!("song {id}: stems differ in rate or channels")));
                }
            }
        }
        let (ids, stems) = songs.into_iter().unzip();
        Ok(Self {
            ids,
            stems,
            sample_rate,
        })
    }

    pub fn load(tracks: &TrackSet) -> Result<Self> {
        let songs = tracks
            .songs
            .par_iter()
            .map(|s| {
                let stems = [
                    read_wav(&s.stem_path(Source::Vocals))?,
                    read_wav(&s.stem_path(Source::Bass))?,
                    read_wav(&s.stem_path(Source::Drums))?,
                    read_wav(&s.stem_path(Source::Other))?,
                ];
                Ok((s.id.clone(), stems))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(songs)
    }
}

impl<T: Scalar> StemStore<T> for MemoryStore<T> {
    fn n_songs(&self) -> usize {
        self.ids.len()
    }

    fn song_id(&self, song: usize) -> &str {
        &self.ids[song]
    }

    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn stem_len(&self, song: usize, source: Source) -> usize {
        self.stems[song][source.index()].len()
    }

    fn read(&self, song: usize, source: Source, start: usize, len: usize) -> Result<Waveform<T>> {
        let w = &self.stems[song][source.index()];
        if start + len > w.len() {
            return Err(Error::Data(format!("read {start}+{len} beyond {} samples", w.len())));
        }
        Ok(w.slice(start, start + len))
    }
}

/// Stems read from WAV files on demand.
#[derive(Debug, Clone)]
pub struct DiskStore {
    tracks: TrackSet,
    lens: Vec<[usize; 4]>,
    sample_rate: u32,
}

impl DiskStore {
    pub fn open(tracks: TrackSet) -> Result<Self> {
        let mut lens = Vec::with_capacity(tracks.len());
        let mut rate = None;
        for s in &tracks.songs {
            let mut l = [0; 4];
            for src in Source::ALL {
                let info = wav_info(&s.stem_path(src))?;
                if *rate.get_or_insert(info.sample_rate) != info.sample_rate {
                    return Err(Error::Data(format!("song {}: mixed sample rates", s.id)));
                }
                l[src.index()] = info.frames;
            }
            lens.push(l);
        }
        let sample_rate = rate.ok_or_else(|| Error::Data("no songs".into()))?;
        Ok(Self {
            tracks,
            lens,
            sample_rate,
        })
    }
}

impl<T: Scalar> StemStore<T> for DiskStore {
    fn n_songs(&self) -> usize {
        self.tracks.len()
    }

    fn song_id(&self, song: usize) -> &str {
        &self.tracks.songs[song].id
    }

    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn stem_len(&self, song: usize, source: Source) -> usize {
        self.lens[song][source.index()]
    }

    fn read(&self, song: usize, source: Source, start: usize, len: usize) -> Result<Waveform<T>> {
        read_wav_range(&self.tracks.songs[song].stem_path(source), start, Some(len))
    }
}

/// Windowed-RMS activity detector settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SadParams {
    pub window_s: f64,
    pub hop_s: f64,
    /// A window is active within this many dB of the reference percentile.
    pub relative_db: f64,
    pub percentile: f64,
    pub floor_dbfs: f64,
    pub min_segment_s: f64,
}

impl Default for SadParams {
    fn default() -> Self {
        Self {
            window_s: 1.0,
            hop_s: 0.5,
            relative_db: 40.0,
            percentile: 90.0,
            floor_dbfs: -60.0,
            min_segment_s: 3.0,
        }
    }
}

impl SadParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_s > 0.0 && self.hop_s > 0.0 && self.hop_s <= self.window_s) {
            return Err(Error::Config("SAD needs 0 < hop <= window".into()));
        }
        if !(0.0..=100.0).contains(&self.percentile) || self.relative_db < 0.0 || self.min_segment_s < 0.0 {
            return Err(Error::Config("SAD percentile must be in [0, 100], thresholds >= 0".into()));
        }
        Ok(())
    }
}

/// Nearest-rank percentile of unsorted values.
fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Active `[start, end)` regions of a stem, sorted, disjoint and at least `min_segment_s` long.
pub fn detect_active_segments<T: Scalar>(w: &Waveform<T>, params: &SadParams) -> Result<Vec<(usize, usize)>> {
    params.validate()?;
    if w.is_empty() {
        return Ok(Vec::new());
    }
    let sr = w.sample_rate as f64;
    let win = ((params.window_s * sr).round() as usize).max(1);
    let hop = ((params.hop_s * sr).round() as usize).max(1);
    let windows = segment_bounds(w.len(), win, hop);
    let rms_db: Vec<f64> = windows
        .iter()
        .map(|&(s, e)| {
            let view = w.samples.slice(ndarray::s![.., s..e]);
            let ms = view.iter().map(|x| x.as_f64().powi(2)).sum::<f64>() / view.len() as f64;
            10.0 * ms.log10()
        })
        .collect();
    let reference = percentile(&rms_db, params.percentile);
    let threshold = (reference - params.relative_db).max(params.floor_dbfs);
    let min_len = (params.min_segment_s * sr).round() as usize;

    let mut segments: Vec<(usize, usize)> = Vec::new();
    for (&(s, e), &db) in windows.iter().zip(&rms_db) {
        if !(db >= threshold && db > params.floor_dbfs) {
            continue;
        }
        match segments.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => segments.push((s, e)),
        }
    }
    segments.retain(|&(s, e)| e - s >= min_len);
    Ok(segments)
}

/// Active segments per (song, stem).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityIndex {
    pub params: SadParams,
    pub song_ids: Vec<String>,
    pub segments: Vec<[Vec<(usize, usize)>; 4]>,
}

impl ActivityIndex {
    pub fn build<T: Scalar, S: StemStore<T> + ?Sized>(store: &S, params: &SadParams) -> Result<Self> {
        let segments = (0..store.n_songs())
            .into_par_iter()
            .map(|song| {
                let mut per = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
                for src in Source::ALL {
                    let stem = store.stem(song, src)?;
                    per[src.index()] = detect_active_segments(&stem, params)?;
                    if per[src.index()].is_empty() {
                        warn!("{} / {src}: no active segment", store.song_id(song));
                    }
                }
                Ok(per)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params: *params,
            song_ids: (0..store.n_songs()).map(|i| store.song_id(i).to_string()).collect(),
            segments,
        })
    }

    /// Key over the detector settings and the stems' identities and lengths.
    pub fn cache_key<T: Scalar, S: StemStore<T> + ?Sized>(store: &S, params: &SadParams) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(params)?);
        h.update(store.sample_rate().to_le_bytes());
        for song in 0..store.n_songs() {
            h.update(store.song_id(song).as_bytes());
            for src in Source::ALL {
                h.update((store.stem_len(song, src) as u64).to_le_bytes());
            }
        }
        Ok(hex::encode(&h.finalize()[..8]))
    }

    /// Loads the sidecar in `dir` when its key matches, otherwise builds and writes it.
    pub fn load_or_build<T: Scalar, S: StemStore<T> + ?Sized>(store: &S, params: &SadParams, dir: &Path) -> Result<Self> {
        let key = Self::cache_key(store, params)?;
        let path = dir.join(format!(".activity-{key}.json"));
        if let Ok(text) = std::fs::read_to_string(&path) {
            match serde_json::from_str::<Self>(&text) {
                Ok(idx) if idx.params == *params && idx.song_ids.len() == store.n_songs() => return Ok(idx),
                _ => warn!("ignoring unreadable activity cache {}", path.display()),
            }
        }
        let idx = Self::build(store, params)?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec(&idx)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(idx)
    }

    pub fn get(&self, song: usize, source: Source) -> &[(usize, usize)] {
        &self.segments[song][source.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropMode {
    EachChunk,
    TargetOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Chunks from active regions, random gains and random drops.
    Sad,
    /// Chunks from anywhere, random channel swap and linear gain, no drops.
    Umx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub chunk_s: f64,
    pub gain_db: f64,
    pub drop_prob: f64,
    pub drop_mode: DropMode,
    pub regime: Regime,
    pub swap_prob: f64,
    pub umx_gain: (f64, f64),
    pub epoch_size: usize,
    pub max_retries: usize,
    pub sad: SadParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            chunk_s: 3.0,
            gain_db: 10.0,
            drop_prob: 0.1,
            drop_mode: DropMode::EachChunk,
            regime: Regime::Sad,
            swap_prob: 0.5,
            umx_gain: (0.25, 1.25),
            epoch_size: 20_000,
            max_retries: 32,
            sad: SadParams::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.chunk_s > 0.0 && self.gain_db >= 0.0 && prob(self.drop_prob) && prob(self.swap_prob)) {
            return Err(Error::Config("chunk_s > 0, gain_db >= 0 and probabilities in [0, 1] required".into()));
        }
        if !(0.0 <= self.umx_gain.0 && self.umx_gain.0 <= self.umx_gain.1) {
            return Err(Error::Config("umx_gain must be an ordered non-negative range".into()));
        }
        if self.epoch_size == 0 {
            return Err(Error::Config("epoch_size must be >= 1".into()));
        }
        self.sad.validate()
    }

    pub fn chunk_samples(&self, sample_rate: u32) -> usize {
        (self.chunk_s * sample_rate as f64).round() as usize
    }
}

/// How one source's chunk was drawn and transformed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkInfo {
    pub song: usize,
    pub start: usize,
    pub gain_db: f64,
    pub linear_gain: f64,
    pub swapped: bool,
    pub dropped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample<T> {
    pub mixture: Waveform<T>,
    pub target: Waveform<T>,
    /// Retained (possibly zeroed) chunks in source order; `mixture` is their sum.
    pub sources: [Waveform<T>; 4],
    pub target_source: Source,
    pub chunks: [ChunkInfo; 4],
    pub seed: u64,
    pub epoch: u64,
    pub index: u64,
}

/// Independent stream for example `index` of `epoch`.
pub fn example_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

/// Scales amplitude by `10^(u/20)`.
pub fn apply_gain_db<T: Scalar>(chunk: &Waveform<T>, u: f64) -> Waveform<T> {
    let g = T::of(10f64.powf(u / 20.0));
    Waveform {
        samples: chunk.samples.mapv(|x| x * g),
        sample_rate: chunk.sample_rate,
    }
}

pub fn swap_channels<T: Scalar>(w: &Waveform<T>) -> Waveform<T> {
    let mut samples = w.samples.clone();
    samples.invert_axis(Axis(0));
    Waveform {
        samples: samples.as_standard_layout().into_owned(),
        sample_rate: w.sample_rate,
    }
}

fn sum_sources<T: Scalar>(sources: &[Waveform<T>; 4]) -> Waveform<T> {
    let mut acc = Array2::zeros(sources[0].samples.raw_dim());
    for s in sources {
        acc += &s.samples;
    }
    Waveform {
        samples: acc,
        sample_rate: sources[0].sample_rate,
    }
}

/// Random channel swap and linear gain per stem, then re-sums the mixture.
pub fn umx_augment<T: Scalar>(mut ex: TrainingExample<T>, cfg: &DataConfig, rng: &mut impl Rng) -> TrainingExample<T> {
    for (src, info) in ex.sources.iter_mut().zip(ex.chunks.iter_mut()) {
        info.swapped = rng.gen_bool(cfg.swap_prob);
        if info.swapped {
            *src = swap_channels(src);
        }
        let (lo, hi) = cfg.umx_gain;
        info.linear_gain = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let g = T::of(info.linear_gain);
        src.samples.mapv_inplace(|x| x * g);
    }
    ex.mixture = sum_sources(&ex.sources);
    ex.target = ex.sources[ex.target_source.index()].clone();
    ex
}

fn pick_start(rng: &mut impl Rng, segments: &[(usize, usize)], chunk: usize) -> Option<usize> {
    let valid: Vec<(usize, usize)> = segments
        .iter()
        .filter(|(s, e)| e - s >= chunk)
        .map(|&(s, e)| (s, e - s - chunk + 1))
        .collect();
    let total: usize = valid.iter().map(|v| v.1).sum();
    if total == 0 {
        return None;
    }
    let mut k = rng.gen_range(0..total);
    for (s, n) in valid {
        if k < n {
            return Some(s + k);
        }
        k -= n;
    }
    None
}

/// Draws one example; a pure function of `(seed, epoch, index)` and the data.
pub fn sample_training_example<T: Scalar, S: StemStore<T> + ?Sized>(
    store: &S,
    activity: Option<&ActivityIndex>,
    cfg: &DataConfig,
    target: Source,
    seed: u64,
    epoch: u64,
    index: u64,
) -> Result<TrainingExample<T>> {
    let n = store.n_songs();
    if n == 0 {
        return Err(Error::Data("no songs to sample from".into()));
    }
    if cfg.regime == Regime::Sad && activity.is_none() {
        return Err(Error::Data("SAD regime needs an activity index".into()));
    }
    let chunk = cfg.chunk_samples(store.sample_rate());
    let mut rng = example_rng(seed, epoch, index);
    let mut songs: Vec<usize> = if n >= 4 {
        sample_indices(&mut rng, n, 4).into_vec()
    } else {
        (0..4).map(|_| rng.gen_range(0..n)).collect()
    };

    let mut starts = [0usize; 4];
    for src in Source::ALL {
        let i = src.index();
        let mut tries = 0;
        loop {
            let song = songs[i];
            let start = match cfg.regime {
                Regime::Sad => pick_start(&mut rng, activity.expect("checked above").get(song, src), chunk),
                Regime::Umx => {
                    let len = store.stem_len(song, src);
                    (len >= chunk).then(|| rng.gen_range(0..=len - chunk))
                }
            };
            if let Some(s) = start {
                starts[i] = s;
                break;
            }
            tries += 1;
            if tries > cfg.max_retries {
                return Err(Error::Data(format!(
                    "no usable {chunk}-sample chunk of {src} after {} song draws",
                    cfg.max_retries
                )));
            }
            let others: Vec<usize> = (0..n).filter(|s| !songs.contains(s)).collect();
            songs[i] = if others.is_empty() {
                rng.gen_range(0..n)
            } else {
                others[rng.gen_range(0..others.len())]
            };
        }
    }

    let mut chunks = Vec::with_capacity(4);
    let mut infos = Vec::with_capacity(4);
    for src in Source::ALL {
        let i = src.index();
        let raw = store.read(songs[i], src, starts[i], chunk)?;
        let (gain_db, dropped) = match cfg.regime {
            Regime::Sad => {
                let u = if cfg.gain_db > 0.0 {
                    rng.gen_range(-cfg.gain_db..=cfg.gain_db)
                } else {
                    0.0
                };
                let may_drop = cfg.drop_mode == DropMode::EachChunk || src == target;
                let d = rng.gen_bool(cfg.drop_prob);
                (u, may_drop && d)
            }
            Regime::Umx => (0.0, false),
        };
        let w = if dropped {
            Waveform::zeros(raw.channels(), raw.len(), raw.sample_rate)
        } else if gain_db != 0.0 {
            apply_gain_db(&raw, gain_db)
        } else {
            raw
        };
        chunks.push(w);
        infos.push(ChunkInfo {
            song: songs[i],
            start: starts[i],
            gain_db,
            linear_gain: 1.0,
            swapped: false,
            dropped,
        });
    }
    let channels = chunks[0].channels();
    if chunks.iter().any(|c| c.channels() != channels) {
        return Err(Error::Data("stems differ in channel count".into()));
    }
    let sources: [Waveform<T>; 4] = chunks.try_into().expect("four sources");
    let chunks: [ChunkInfo; 4] = infos.try_into().expect("four sources");
    let ex = TrainingExample {
        mixture: sum_sources(&sources),
        target: sources[target.index()].clone(),
        sources,
        target_source: target,
        chunks,
        seed,
        epoch,
        index,
    };
    Ok(match cfg.regime {
        Regime::Sad => ex,
        Regime::Umx => umx_augment(ex, cfg, &mut rng),
    })
}

/// The `cfg.epoch_size` examples of one epoch, in index order.
pub fn make_epoch<'a, T: Scalar, S: StemStore<T> + ?Sized>(
    store: &'a S,
    activity: Option<&'a ActivityIndex>,
    cfg: &'a DataConfig,
    target: Source,
    seed: u64,
    epoch: u64,
) -> impl Iterator<Item = Result<TrainingExample<T>>> + 'a {
    (0..cfg.epoch_size as u64).map(move |i| sample_training_example(store, activity, cfg, target, seed, epoch, i))
}

/// Examples `indices` of one epoch generated in parallel; order follows `indices`.
pub fn generate_examples<T: Scalar, S: StemStore<T> + ?Sized>(
    store: &S,
    activity: Option<&ActivityIndex>,
    cfg: &DataConfig,
    target: Source,
    seed: u64,
    epoch: u64,
    indices: &[u64],
) -> Result<Vec<TrainingExample<T>>> {
    indices
        .par_iter()
        .map(|&i| sample_training_example(store, activity, cfg, target, seed, epoch, i))
        .collect()
}

/// Synthetic multitrack song with spectrally distinct stems.
///
/// Vocals are a vibrato tone near 440 Hz with a pause, bass a low tone, drums decaying noise
/// bursts and other a three-note chord. Amplitudes stay well inside full scale.
pub fn synthetic_song(seconds: f64, sample_rate: u32, seed: u64) -> [Waveform<f32>; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (seconds * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let tau = std::f64::consts::TAU;
    let f_voc = rng.gen_range(330.0..550.0);
    let f_bass = rng.gen_range(45.0..90.0);
    let chord = [rng.gen_range(200.0..260.0), rng.gen_range(280.0..320.0), rng.gen_range(340.0..380.0)];
    let beat = rng.gen_range(0.3..0.6);
    let pan: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.3..0.7));
    let pause = (rng.gen_range(0.3..0.6) * seconds, rng.gen_range(0.65..0.8) * seconds);
    let mut noise = ChaCha8Rng::seed_from_u64(seed ^ 0xD1B5_4A32_D192_ED03);

    let mut stems: [Array2<f32>; 4] = std::array::from_fn(|_| Array2::zeros((2, len)));
    for t in 0..len {
        let s = t as f64 / sr;
        let voiced = !(pause.0..pause.1).contains(&s);
        let vib = f_voc * s + 3.0 * (tau * 5.0 * s).sin() / tau;
        let voc = if voiced { 0.3 * (tau * vib).sin() + 0.1 * (2.0 * tau * vib).sin() } else { 0.0 };
        let bass = 0.35 * (tau * f_bass * s).sin();
        let phase = (s / beat).fract();
        let drum = 0.5 * (-phase * 25.0).exp() * noise.gen_range(-1.0..1.0);
        let other: f64 = chord.iter().map(|f| 0.08 * (tau * f * s).sin()).sum();
        for (k, v) in [voc, bass, drum, other].into_iter().enumerate() {
            stems[k][[0, t]] = (v * (1.0 - pan[k]) * 2.0) as f32;
            stems[k][[1, t]] = (v * pan[k] * 2.0) as f32;
        }
    }
    stems.map(|s| Waveform {
        samples: s,
        sample_rate,
    })
}

/// Writes a dataset with the standard layout under `root`; returns the song directories.
pub fn write_synthetic_dataset(
    root: &Path,
    counts: [(Split, usize); 3],
    seconds: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for (split, n) in counts {
        let folder = match split {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        };
        for i in 0..n {
            let dir = root.join(folder).join(format!("{folder}-song-{i:02}"));
            let song_seed = seed.wrapping_mul(1000).wrapping_add(dirs.len() as u64);
            let stems = synthetic_song(seconds, sample_rate, song_seed);
            for src in Source::ALL {
                write_wav(&dir.join(format!("{src}.wav")), &stems[src.index()])?;
            }
            let mix = sum_sources(&stems);
            write_wav(&dir.join("mixture.wav"), &mix)?;
            dirs.push(dir);
        }
    }
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(seconds: f64, amp: f32, sr: u32) -> Waveform<f32> {
        let len = (seconds * sr as f64) as usize;
        Waveform::new(
            Array2::from_shape_fn((2, len), |(_, t)| amp * (t as f32 * 0.37).sin()),
            sr,
        )
        .unwrap()
    }

    fn concat(parts: &[Waveform<f32>]) -> Waveform<f32> {
        let views: Vec<_> = parts.iter().map(|p| p.samples.view()).collect();
        Waveform::new(ndarray::concatenate(Axis(1), &views).unwrap(), parts[0].sample_rate).unwrap()
    }

    #[test]
    fn sad_silence_tone_and_gaps() {
        let sr = 200;
        let p = SadParams::default();
        assert!(detect_active_segments(&Waveform::<f32>::zeros(2, 20 * sr as usize, sr), &p).unwrap().is_empty());
        let full = tone(12.3, 1.0, sr);
        assert_eq!(detect_active_segments(&full, &p).unwrap(), vec![(0, full.len())]);

        let w = concat(&[tone(5.0, 0.5, sr), Waveform::zeros(2, 5 * sr as usize, sr), tone(5.0, 0.5, sr)]);
        let segs = detect_active_segments(&w, &p).unwrap();
        assert_eq!(segs.len(), 2);
        let win = sr as usize;
        let truth = [(0, 5 * win), (10 * win, 15 * win)];
        for (s, t) in segs.iter().zip(truth) {
            assert!(s.0.abs_diff(t.0) <= win && s.1.abs_diff(t.1) <= win, "{s:?} vs {t:?}");
        }
        // a stem that is only active for 2 s yields nothing
        let short = concat(&[tone(2.0, 0.5, sr), Waveform::zeros(2, 8 * sr as usize, sr)]);
        assert!(detect_active_segments(&short, &p).unwrap().is_empty());
        // quieter than the absolute floor
        assert!(detect_active_segments(&tone(10.0, 1e-4, sr), &p).unwrap().is_empty());
    }

    #[test]
    fn gain_closed_forms() {
        let w = tone(1.0, 0.5, 100);
        assert_eq!(apply_gain_db(&w, 0.0), w);
        let down = apply_gain_db(&w, -10.0);
        assert!((down.samples[[0, 3]] / w.samples[[0, 3]] - 0.316_227_77).abs() < 1e-6);
        let w64 = Waveform::new(w.samples.mapv(|x| x as f64), 100).unwrap();
        for u in [-10.0, -3.3, 0.0, 7.0, 10.0] {
            let ratio = apply_gain_db(&w64, u).energy() / w64.energy();
            assert!((10.0 * ratio.log10() - u).abs() < 1e-9);
        }
    }

    #[test]
    fn swap_is_an_involution() {
        let w = Waveform::new(Array2::from_shape_fn((2, 7), |(c, t)| (c * 10 + t) as f32), 10).unwrap();
        assert_ne!(swap_channels(&w), w);
        assert_eq!(swap_channels(&swap_channels(&w)), w);
    }

    fn store(n: usize, seconds: f64) -> MemoryStore<f32> {
        MemoryStore::new((0..n).map(|i| (format!("s{i}"), synthetic_song(seconds, 400, i as u64))).collect()).unwrap()
    }

    #[test]
    fn degenerate_drop_and_gain_settings() {
        let st = store(5, 12.0);
        let idx = ActivityIndex::build(&st, &SadParams::default()).unwrap();
        let all = DataConfig { drop_prob: 1.0, ..Default::default() };
        let ex = sample_training_example(&st, Some(&idx), &all, Source::Vocals, 1, 0, 0).unwrap();
        assert!(ex.mixture.samples.iter().all(|&x| x == 0.0));
        assert!(ex.target.samples.iter().all(|&x| x == 0.0));

        let raw = DataConfig { drop_prob: 0.0, gain_db: 0.0, ..Default::default() };
        let ex = sample_training_example(&st, Some(&idx), &raw, Source::Bass, 1, 0, 3).unwrap();
        let mut sum = Array2::<f32>::zeros(ex.mixture.samples.raw_dim());
        for src in Source::ALL {
            let c = &ex.chunks[src.index()];
            sum += &st.read(c.song, src, c.start, 1200).unwrap().samples;
        }
        assert_eq!(ex.mixture.samples, sum);
        let distinct: BTreeSet<usize> = ex.chunks.iter().map(|c| c.song).collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn target_only_mode_never_drops_others() {
        let st = store(4, 12.0);
        let idx = ActivityIndex::build(&st, &SadParams::default()).unwrap();
        let cfg = DataConfig { drop_prob: 1.0, drop_mode: DropMode::TargetOnly, ..Default::default() };
        let ex = sample_training_example(&st, Some(&idx), &cfg, Source::Drums, 2, 0, 0).unwrap();
        assert!(ex.target.samples.iter().all(|&x| x == 0.0));
        assert_eq!(ex.chunks.iter().filter(|c| c.dropped).count(), 1);
        assert!(ex.mixture.energy() > 0.0);
    }

    #[test]
    fn epochs_are_deterministic_and_order_free() {
        let st = store(4, 10.0);
        let idx = ActivityIndex::build(&st, &SadParams::default()).unwrap();
        let cfg = DataConfig { epoch_size: 8, ..Default::default() };
        let a: Vec<_> = make_epoch(&st, Some(&idx), &cfg, Source::Vocals, 9, 2).collect::<Result<_>>().unwrap();
        let b: Vec<_> = make_epoch(&st, Some(&idx), &cfg, Source::Vocals, 9, 2).collect::<Result<_>>().unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, b);
        let shuffled = generate_examples(&st, Some(&idx), &cfg, Source::Vocals, 9, 2, &[5, 2, 7, 0]).unwrap();
        for ex in shuffled {
            assert_eq!(ex, a[ex.index as usize]);
        }
        let other_epoch = sample_training_example(&st, Some(&idx), &cfg, Source::Vocals, 9, 3, 0).unwrap();
        assert_ne!(other_epoch.mixture, a[0].mixture);
    }

    #[test]
    fn umx_regime_swaps_and_scales() {
        let st = store(4, 10.0);
        let cfg = DataConfig { regime: Regime::Umx, ..Default::default() };
        let ex = sample_training_example(&st, None, &cfg, Source::Other, 4, 0, 1).unwrap();
        for (src, info) in Source::ALL.iter().zip(&ex.chunks) {
            assert!((0.25..=1.25).contains(&info.linear_gain));
            assert!(!info.dropped);
            let mut raw = st.read(info.song, *src, info.start, 1200).unwrap();
            if info.swapped {
                raw = swap_channels(&raw);
            }
            let g = info.linear_gain as f32;
            assert_eq!(raw.samples.mapv(|x| x * g), ex.sources[src.index()].samples);
        }
        assert!(sample_training_example(&st, None, &DataConfig::default(), Source::Other, 4, 0, 1).is_err());
    }

    #[test]
    fn silent_stems_exhaust_retries() {
        let silent = |id: &str| {
            let z = Waveform::<f32>::zeros(2, 4000, 400);
            (id.to_string(), [z.clone(), z.clone(), z.clone(), z])
        };
        let st = MemoryStore::new(vec![silent("a"), silent("b")]).unwrap();
        let idx = ActivityIndex::build(&st, &SadParams::default()).unwrap();
        let cfg = DataConfig { max_retries: 3, ..Default::default() };
        assert!(matches!(
            sample_training_example(&st, Some(&idx), &cfg, Source::Vocals, 0, 0, 0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn dataset_layout_store_and_cache() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), [(Split::Train, 3), (Split::Valid, 1), (Split::Test, 1)], 4.0, 400, 0).unwrap();
        let train = TrackSet::load(dir.path(), Split::Train).unwrap();
        assert_eq!(train.len(), 3);
        assert_eq!(TrackSet::load(dir.path(), Split::Valid).unwrap().len(), 1);
        let disk = DiskStore::open(train.clone()).unwrap();
        let mem = MemoryStore::<f32>::load(&train).unwrap();
        assert_eq!(
            StemStore::<f32>::read(&disk, 1, Source::Bass, 100, 50).unwrap(),
            mem.read(1, Source::Bass, 100, 50).unwrap()
        );
        let p = SadParams { min_segment_s: 1.0, ..Default::default() };
        let built = ActivityIndex::load_or_build::<f32, _>(&disk, &p, dir.path()).unwrap();
        let cached = ActivityIndex::load_or_build::<f32, _>(&disk, &p, dir.path()).unwrap();
        assert_eq!(built, cached);
        let n_files = std::fs::read_dir(dir.path()).unwrap().filter(|e| {
            e.as_ref().unwrap().file_name().to_string_lossy().starts_with(".activity-")
        }).count();
        assert_eq!(n_files, 1);
        let other = SadParams { relative_db: 30.0, ..p };
        assert_ne!(
            ActivityIndex::cache_key::<f32, _>(&disk, &p).unwrap(),
            ActivityIndex::cache_key::<f32, _>(&disk, &other).unwrap()
        );
        std::fs::remove_file(dir.path().join("train/train-song-00/drums.wav")).unwrap();
        assert!(TrackSet::load(dir.path(), Split::Train).is_err());
    }

    #[test]
    fn validation_list_has_fourteen_songs() {
        assert_eq!(validation_song_names().len(), 14);
    }
}
