//! Speech Commands ingestion: labels, speaker-keyed splits and silence crops.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha1::{Digest, Sha1};

use crate::error::{Error, Result};
use crate::frontend::{load_wav, load_wav_full, AudioClip, CLIP_SAMPLES};

pub const KEYWORDS: [&str; 10] = ["yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go"];
pub const UNKNOWN_LABEL: usize = 10;
pub const SILENCE_LABEL: usize = 11;
pub const LABEL_NAMES: [&str; 12] = [
    "yes",
    "no",
    "up",
    "down",
    "left",
    "right",
    "on",
    "off",
    "stop",
    "go",
    "_unknown_",
    "_silence_",
];
pub const BACKGROUND_NOISE_DIR: &str = "_background_noise_";
pub const DEFAULT_VAL_PCT: f64 = 10.0;
pub const DEFAULT_TEST_PCT: f64 = 10.0;

const MAX_NUM_WAVS_PER_CLASS: u64 = (1 << 27) - 1;

pub fn label_for_word(word: &str) -> usize {
    KEYWORDS.iter().position(|k| *k == word).unwrap_or(UNKNOWN_LABEL)
}

/// Speaker id: the file name part before `_nohash_`.
pub fn speaker_of(file_name: &str) -> Option<&str> {
    let stem = file_name.strip_suffix(".wav")?;
    let (speaker, take) = stem.split_once("_nohash_")?;
    if speaker.is_empty() || take.is_empty() {
        return None;
    }
    Some(speaker)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" | "training" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" | "testing" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split `{s}`"))),
        }
    }
}

/// Position of a speaker in `[0, 100]`, from the SHA-1 digest of its id.
pub fn split_percentile(speaker_id: &str) -> f64 {
    let digest = Sha1::digest(speaker_id.as_bytes());
    // digest mod 2^27 only depends on the last four bytes
    let tail = u32::from_be_bytes([digest[16], digest[17], digest[18], digest[19]]) as u64;
    let bucket = tail % (MAX_NUM_WAVS_PER_CLASS + 1);
    bucket as f64 * (100.0 / MAX_NUM_WAVS_PER_CLASS as f64)
}

pub fn assign_split(speaker_id: &str, val_pct: f64, test_pct: f64) -> Split {
    let p = split_percentile(speaker_id);
    if p < val_pct {
        Split::Val
    } else if p < val_pct + test_pct {
        Split::Test
    } else {
        Split::Train
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub raw_word: String,
    pub label: usize,
    pub speaker_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    pub speakers: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn from_records(records: &[SampleRecord]) -> Result<Self> {
        let mut speakers = BTreeMap::new();
        for r in records {
            if let Some(prev) = speakers.insert(r.speaker_id.clone(), r.split) {
                if prev != r.split {
                    return Err(Error::Dataset(format!(
                        "speaker {} appears in both {prev} and {}",
                        r.speaker_id, r.split
                    )));
                }
            }
        }
        Ok(SplitAssignment { speakers })
    }

    pub fn get(&self, speaker: &str) -> Option<Split> {
        self.speakers.get(speaker).copied()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    /// Sorted by path.
    pub records: Vec<SampleRecord>,
    pub noise_files: Vec<PathBuf>,
    /// Wav files whose names do not carry a speaker id.
    pub skipped: Vec<PathBuf>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        v.push(e.map_err(|e| Error::io(dir, e))?.path());
    }
    v.sort();
    Ok(v)
}

fn is_wav(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

pub fn scan(dir: impl AsRef<Path>) -> Result<Dataset> {
    scan_with(dir, DEFAULT_VAL_PCT, DEFAULT_TEST_PCT)
}

pub fn scan_with(dir: impl AsRef<Path>, val_pct: f64, test_pct: f64) -> Result<Dataset> {
    let root = dir.as_ref();
    if !(0.0..=100.0).contains(&val_pct) || !(0.0..=100.0).contains(&test_pct) || val_pct + test_pct > 100.0 {
        return Err(Error::InvalidArgument(format!(
            "split percentages {val_pct} / {test_pct}"
        )));
    }
    let mut records = Vec::new();
    let mut noise_files = Vec::new();
    let mut skipped = Vec::new();
    for sub in sorted_entries(root)? {
        if !sub.is_dir() {
            continue;
        }
        let word = sub.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if word == BACKGROUND_NOISE_DIR {
            noise_files.extend(sorted_entries(&sub)?.into_iter().filter(|p| is_wav(p)));
            continue;
        }
        if word.starts_with('_') || word.starts_with('.') {
            continue;
        }
        for path in sorted_entries(&sub)? {
            if !is_wav(&path) {
                continue;
            }
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let Some(speaker) = speaker_of(name) else {
                log::warn!("skipping {}: no speaker id in file name", path.display());
                skipped.push(path);
                continue;
            };
            records.push(SampleRecord {
                label: label_for_word(&word),
                raw_word: word.clone(),
                speaker_id: speaker.to_string(),
                split: assign_split(speaker, val_pct, test_pct),
                path: path.clone(),
            });
        }
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!("no utterances found under {}", root.display())));
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(Dataset {
        root: root.to_path_buf(),
        records,
        noise_files,
        skipped,
    })
}

/// How many unknown and silence examples join the keywords of a split,
/// as fractions of the keyword count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Balance {
    pub unknown_fraction: f64,
    pub silence_fraction: f64,
}

impl Default for Balance {
    fn default() -> Self {
        Balance {
            unknown_fraction: 0.1,
            silence_fraction: 0.1,
        }
    }
}

/// A silence example: an attenuated one-second window of a noise recording.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SilenceCrop {
    pub clip: usize,
    pub offset: usize,
    pub gain: f32,
}

pub fn plan_silence(noise_lengths: &[usize], count: usize, rng_seed: u64) -> Result<Vec<SilenceCrop>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if noise_lengths.is_empty() {
        return Err(Error::Dataset(
            "silence needs at least one background noise clip".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok((0..count)
        .map(|_| {
            let clip = rng.gen_range(0..noise_lengths.len());
            let offset = rng.gen_range(0..=noise_lengths[clip].saturating_sub(CLIP_SAMPLES));
            let gain = rng.gen_range(0.0f32..=1.0);
            SilenceCrop { clip, offset, gain }
        })
        .collect())
}

pub fn render_silence(noise: &[AudioClip], crop: &SilenceCrop) -> Result<AudioClip> {
    let src = noise
        .get(crop.clip)
        .ok_or_else(|| Error::Dataset(format!("silence refers to missing noise clip {}", crop.clip)))?;
    let end = (crop.offset + CLIP_SAMPLES).min(src.len());
    let window: Vec<f32> = src.samples()[crop.offset.min(end)..end]
        .iter()
        .map(|s| s * crop.gain)
        .collect();
    Ok(AudioClip::new(window, src.sample_rate_hz())?.fit_to(CLIP_SAMPLES))
}

/// `count` one-second crops of the noise clips, scaled by U[0, 1].
pub fn make_silence(noise_clips: &[AudioClip], count: usize, rng_seed: u64) -> Result<Vec<AudioClip>> {
    if noise_clips.is_empty() {
        return Err(Error::Dataset(
            "silence needs at least one background noise clip".into(),
        ));
    }
    let lengths: Vec<usize> = noise_clips.iter().map(AudioClip::len).collect();
    plan_silence(&lengths, count, rng_seed)?
        .iter()
        .map(|c| render_silence(noise_clips, c))
        .collect()
}

#[derive(Debug, Clone)]
pub enum Source {
    File(PathBuf),
    Silence(SilenceCrop),
    Clip(Arc<AudioClip>),
}

#[derive(Debug, Clone)]
pub struct Example {
    pub source: Source,
    pub label: usize,
}

impl Example {
    pub fn from_clip(clip: AudioClip, label: usize) -> Self {
        Example {
            source: Source::Clip(Arc::new(clip)),
            label,
        }
    }

    /// One-second audio for this example.
    pub fn load(&self, noise: &[AudioClip]) -> Result<AudioClip> {
        match &self.source {
            Source::File(p) => load_wav(p),
            Source::Silence(c) => render_silence(noise, c),
            Source::Clip(c) => Ok(c.as_ref().clone().fit_to(CLIP_SAMPLES)),
        }
    }
}

impl Dataset {
    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn assignment(&self) -> Result<SplitAssignment> {
        SplitAssignment::from_records(&self.records)
    }

    pub fn load_noise(&self) -> Result<Vec<AudioClip>> {
        self.noise_files.iter().map(load_wav_full).collect()
    }

    /// Record counts per split: `[train, val, test]`.
    pub fn split_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for r in &self.records {
            c[r.split as usize] += 1;
        }
        c
    }

    /// Examples of `split`: every keyword utterance, a seeded sample of
    /// unknown words and seeded silence crops, in shuffled order.
    pub fn examples(&self, split: Split, noise_lengths: &[usize], balance: Balance, seed: u64) -> Result<Vec<Example>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (split as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut keywords = Vec::new();
        let mut unknown = Vec::new();
        for r in self.split_records(split) {
            let e = Example {
                source: Source::File(r.path.clone()),
                label: r.label,
            };
            if r.label == UNKNOWN_LABEL {
                unknown.push(e);
            } else {
                keywords.push(e);
            }
        }
        let base = keywords.len().max(1) as f64;
        let n_unknown = ((balance.unknown_fraction * base).ceil() as usize).min(unknown.len());
        let n_silence = (balance.silence_fraction * base).ceil() as usize;
        unknown.shuffle(&mut rng);
        keywords.extend(unknown.into_iter().take(n_unknown));
        let silence_seed = rng.gen();
        keywords.extend(
            plan_silence(noise_lengths, n_silence, silence_seed)?
                .into_iter()
                .map(|c| Example {
                    source: Source::Silence(c),
                    label: SILENCE_LABEL,
                }),
        );
        keywords.shuffle(&mut rng);
        if keywords.is_empty() {
            return Err(Error::Dataset(format!("the {split} split is empty")));
        }
        Ok(keywords)
    }

    /// `path,label,speaker,split`
    pub fn write_manifest<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["path", "label", "speaker", "split"])?;
        for r in &self.records {
            w.write_record([
                r.path.to_string_lossy().as_ref(),
                &r.label.to_string(),
                &r.speaker_id,
                r.split.as_str(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&self.root, e))?;
        Ok(())
    }
}
