//! Dataset ingestion, the synthetic video generator, and run configuration.
//!
//! On-disk layout: `root/<person_id>/cam<1|2>/<frame>.{ppm,png}`, frames
//! ordered lexicographically by file name and resized to 64x56 at ingestion.
//! The synthetic generator builds the same structure in memory: per identity
//! a distinct translating multi-sinusoid texture, so both appearance and
//! motion carry identity signal; camera 2 applies a photometric shift.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::preprocess::{RawFrame, SRC_H, SRC_W};
use crate::rng::RngStream;
use crate::train::TrainConfig;

#[derive(Debug)]
pub struct PersonEntry {
    pub person_id: usize,
    pub cam1_files: Vec<PathBuf>,
    pub cam2_files: Vec<PathBuf>,
}

/// Validated file layout of a dataset directory (no pixels loaded yet).
#[derive(Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub people: Vec<PersonEntry>,
    /// Ingestion size every frame is resized to, (height, width).
    pub frame_size: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct PersonVideos {
    pub person_id: usize,
    pub cam1: Vec<RawFrame>,
    pub cam2: Vec<RawFrame>,
}

#[derive(Debug, Clone)]
pub struct VideoDataset {
    pub people: Vec<PersonVideos>,
}

impl VideoDataset {
    pub fn ids(&self) -> Vec<usize> {
        self.people.iter().map(|p| p.person_id).collect()
    }

    pub fn person(&self, id: usize) -> Option<&PersonVideos> {
        self.people.iter().find(|p| p.person_id == id)
    }
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if path.is_file() && matches!(ext.as_deref(), Some("ppm" | "png")) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Walks the layout and validates it, collecting every problem found.
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::DatasetLoad(vec![format!("{} is not a directory", root.display())]));
    }
    let mut problems = Vec::new();
    let mut people = Vec::new();
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let person_id: usize = match name.parse() {
            Ok(id) => id,
            Err(_) => {
                problems.push(format!("directory {name:?} is not a numeric person id"));
                continue;
            }
        };
        let mut cams = Vec::new();
        for cam in 1..=2u8 {
            let cam_dir = dir.join(format!("cam{cam}"));
            if !cam_dir.is_dir() {
                problems.push(format!("person {person_id} is missing cam{cam}"));
                continue;
            }
            match frame_files(&cam_dir) {
                Ok(files) if files.is_empty() => {
                    problems.push(format!("person {person_id} cam{cam} has no frames"))
                }
                Ok(files) => cams.push(files),
                Err(e) => problems.push(format!("person {person_id} cam{cam}: {e}")),
            }
        }
        if let [cam1_files, cam2_files] = &mut cams[..] {
            people.push(PersonEntry {
                person_id,
                cam1_files: std::mem::take(cam1_files),
                cam2_files: std::mem::take(cam2_files),
            });
        }
    }
    if people.is_empty() {
        problems.push("no person directories found".into());
    }
    if !problems.is_empty() {
        return Err(Error::DatasetLoad(problems));
    }
    people.sort_by_key(|p| p.person_id);
    Ok(DatasetManifest { root: root.to_path_buf(), people, frame_size: (SRC_H, SRC_W) })
}

fn decode_frame(path: &Path) -> std::result::Result<RawFrame, String> {
    let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
    let img = image::ImageReader::open(path)
        .map_err(|e| format!("{name}: {e}"))?
        .decode()
        .map_err(|e| format!("{name}: {e}"))?;
    let rgb = image::imageops::resize(
        &img.to_rgb8(),
        SRC_W as u32,
        SRC_H as u32,
        image::imageops::FilterType::Triangle,
    );
    let hw = SRC_H * SRC_W;
    let mut planar = vec![0.0f64; 3 * hw];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            planar[c * hw + i] = px.0[c] as f64 / 255.0;
        }
    }
    RawFrame::new(SRC_W, SRC_H, planar).map_err(|e| format!("{name}: {e}"))
}

/// Scans, decodes, and resizes the whole tree into memory.
pub fn load_dataset(root: &Path) -> Result<VideoDataset> {
    let manifest = scan_dataset(root)?;
    let mut people = Vec::with_capacity(manifest.people.len());
    for entry in &manifest.people {
        let load_cam = |files: &[PathBuf], cam: u8| -> Result<Vec<RawFrame>> {
            files
                .iter()
                .map(|f| {
                    decode_frame(f).map_err(|msg| {
                        Error::DatasetLoad(vec![format!(
                            "person {} cam{}: {msg}",
                            entry.person_id, cam
                        )])
                    })
                })
                .collect()
        };
        people.push(PersonVideos {
            person_id: entry.person_id,
            cam1: load_cam(&entry.cam1_files, 1)?,
            cam2: load_cam(&entry.cam2_files, 2)?,
        });
    }
    Ok(VideoDataset { people })
}

/// Materializes a dataset to disk in the ingestion layout (8-bit PPM frames).
pub fn write_dataset(ds: &VideoDataset, root: &Path) -> Result<()> {
    for person in &ds.people {
        for (cam, frames) in [(1u8, &person.cam1), (2, &person.cam2)] {
            let dir = root.join(person.person_id.to_string()).join(format!("cam{cam}"));
            fs::create_dir_all(&dir)?;
            for (t, frame) in frames.iter().enumerate() {
                let hw = frame.width * frame.height;
                let mut buf = Vec::with_capacity(3 * hw);
                for i in 0..hw {
                    for c in 0..3 {
                        buf.push((frame.rgb[c * hw + i] * 255.0).round().clamp(0.0, 255.0) as u8);
                    }
                }
                let img = image::RgbImage::from_raw(frame.width as u32, frame.height as u32, buf)
                    .expect("buffer sized to the frame");
                img.save(dir.join(format!("{t:04}.ppm")))
                    .map_err(|e| Error::DatasetLoad(vec![format!("writing frame: {e}")]))?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticSpec {
    pub identities: usize,
    /// Sequence length range, drawn uniformly per sequence.
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Camera-2 photometric transform: v -> contrast*(v-0.5) + 0.5 + brightness.
    pub cam2_brightness: f64,
    pub cam2_contrast: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            identities: 16,
            min_len: 23,
            max_len: 192,
            seed: 7,
            cam2_brightness: 0.1,
            cam2_contrast: 0.85,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::invalid("synthetic", "need at least 2 identities"));
        }
        if !(23..=192).contains(&self.min_len)
            || !(23..=192).contains(&self.max_len)
            || self.min_len > self.max_len
        {
            return Err(Error::invalid(
                "synthetic",
                format!("length range {}..{} outside the 23..192 sequence regime", self.min_len, self.max_len),
            ));
        }
        Ok(())
    }

    pub fn cam2_transform(&self, v: f64) -> f64 {
        (self.cam2_contrast * (v - 0.5) + 0.5 + self.cam2_brightness).clamp(0.0, 1.0)
    }
}

// Shared channel weights: per-identity color statistics would let even random
// projections match identities across cameras.
const CHANNEL_WEIGHT: [f64; 3] = [0.86, 0.70, 0.54];
const COMPONENTS: usize = 4;
// One shared spatial frequency: a per-identity magnitude profile would leak
// through any filter's energy response.
const FREQ_MAG: f64 = 0.28;

struct TextureParams {
    fx: Vec<f64>,
    fy: Vec<f64>,
    phase: Vec<f64>,
}

/// The wave orientations that define an identity's texture. Everything else
/// about a sequence (phases, motion, gain, photometry, timing) varies per
/// camera, so matching across cameras requires orientation-selective
/// features rather than raw image statistics.
pub fn identity_orientations(spec: &SyntheticSpec, identity: usize) -> Vec<f64> {
    let mut rng = RngStream::new(spec.seed).fork_indexed("identity", identity as u64);
    (0..COMPONENTS).map(|_| rng.uniform_in(0.0, std::f64::consts::PI)).collect()
}

fn texture_params(spec: &SyntheticSpec, identity: usize, cam: u8) -> TextureParams {
    let thetas = identity_orientations(spec, identity);
    // Phases are a camera-local realization: sharing them would make the two
    // views the same image up to translation, which spatially pooled features
    // of any network match without training.
    let mut rng = RngStream::new(spec.seed)
        .fork_indexed("identity", identity as u64)
        .fork_indexed("texture", cam as u64);
    let mut fx = Vec::new();
    let mut fy = Vec::new();
    let mut phase = Vec::new();
    for theta in thetas {
        fx.push(FREQ_MAG * theta.cos());
        fy.push(FREQ_MAG * theta.sin());
        phase.push(rng.uniform_in(0.0, TAU));
    }
    TextureParams { fx, fy, phase }
}

/// The motion vector a camera's sequence translates with (pixels per frame).
/// Drawn per camera from a shared speed band: a motion shared across cameras,
/// or a per-identity speed, would be an identity code readable without any
/// training. All sequences still get mutually distinct velocities.
pub fn synthetic_velocity(spec: &SyntheticSpec, identity: usize, cam: u8) -> (f64, f64) {
    let mut rng = RngStream::new(spec.seed)
        .fork_indexed("identity", identity as u64)
        .fork_indexed("motion", cam as u64);
    let dir = rng.uniform_in(0.0, TAU);
    let speed = rng.uniform_in(0.5, 0.9);
    (speed * dir.cos(), speed * dir.sin())
}

fn render_frame(
    p: &TextureParams,
    spec: &SyntheticSpec,
    cam: u8,
    velocity: (f64, f64),
    gain: f64,
    tau: f64,
    rng: &mut RngStream,
) -> RawFrame {
    let hw = SRC_H * SRC_W;
    let mut rgb = vec![0.0f64; 3 * hw];
    for y in 0..SRC_H {
        for x in 0..SRC_W {
            let (sx, sy) = (x as f64 - velocity.0 * tau, y as f64 - velocity.1 * tau);
            let mut pat = 0.0;
            for k in 0..COMPONENTS {
                pat += (p.fx[k] * sx + p.fy[k] * sy + p.phase[k]).sin();
            }
            pat /= COMPONENTS as f64;
            let noise = rng.uniform_in(-0.01, 0.01);
            for c in 0..3 {
                let mut v = (0.5 + gain * 0.38 * CHANNEL_WEIGHT[c] * pat + noise).clamp(0.0, 1.0);
                if cam == 2 {
                    v = spec.cam2_transform(v);
                }
                rgb[c * hw + y * SRC_W + x] = v;
            }
        }
    }
    RawFrame::new(SRC_W, SRC_H, rgb).expect("values clamped to [0,1]")
}

/// Deterministic in-memory dataset: `identities` people, two camera sequences
/// each, lengths drawn uniformly from the spec range.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<VideoDataset> {
    spec.validate()?;
    let mut people = Vec::with_capacity(spec.identities);
    for id in 0..spec.identities {
        let mut cams = Vec::new();
        for cam in 1..=2u8 {
            let params = texture_params(spec, id, cam);
            let velocity = synthetic_velocity(spec, id, cam);
            let mut rng = RngStream::new(spec.seed)
                .fork_indexed("identity", id as u64)
                .fork_indexed("sequence", cam as u64);
            let len = spec.min_len + rng.below((spec.max_len - spec.min_len + 1) as u64) as usize;
            let start = rng.uniform_in(0.0, 40.0);
            // Exposure varies per sequence; it buries residual contrast cues
            // for an untrained embedding.
            let gain = rng.uniform_in(0.85, 1.15);
            let frames: Vec<RawFrame> = (0..len)
                .map(|t| render_frame(&params, spec, cam, velocity, gain, start + t as f64, &mut rng))
                .collect();
            cams.push(frames);
        }
        let cam2 = cams.pop().unwrap();
        let cam1 = cams.pop().unwrap();
        people.push(PersonVideos { person_id: id, cam1, cam2 });
    }
    Ok(VideoDataset { people })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Directory { path: PathBuf },
}

impl DataSource {
    pub fn load(&self) -> Result<VideoDataset> {
        match self {
            DataSource::Synthetic(spec) => generate_synthetic(spec),
            DataSource::Directory { path } => load_dataset(path),
        }
    }
}

/// Full resolved configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub source: DataSource,
    pub out_dir: PathBuf,
    /// Frames per sequence at evaluation.
    pub max_len: usize,
    /// Train/test split repetitions.
    pub repetitions: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            source: DataSource::Synthetic(SyntheticSpec::default()),
            out_dir: PathBuf::from("out"),
            max_len: 128,
            repetitions: 10,
        }
    }
}

impl RunConfig {
    /// Applies one `key=value` override.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("key {key}: invalid {what} {value:?}"));
        let parse_usize = || value.parse::<usize>().map_err(|_| bad("count"));
        let parse_f64 = || value.parse::<f64>().map_err(|_| bad("number"));
        let mut synth = |f: &mut dyn FnMut(&mut SyntheticSpec) -> Result<()>| -> Result<()> {
            match &mut self.source {
                DataSource::Synthetic(spec) => f(spec),
                DataSource::Directory { .. } => Err(Error::Config(format!(
                    "key {key}: synthetic settings conflict with dataset="
                ))),
            }
        };
        match key {
            "epochs" => self.train.epochs = parse_usize()?,
            "seq_len" => self.train.seq_len = parse_usize()?,
            "lr" => self.train.lr = parse_f64()?,
            "momentum" => self.train.momentum = parse_f64()?,
            "margin" => self.train.margin = parse_f64()?,
            "filters" => self.train.filters = parse_usize()?,
            "refine_steps" => self.train.refine_steps = parse_usize()?,
            "seed" => self.train.seed = value.parse::<u64>().map_err(|_| bad("seed"))?,
            "checkpoint_every" => self.train.checkpoint_every = parse_usize()?,
            "dataset" => {
                if matches!(&self.source, DataSource::Synthetic(s) if *s != SyntheticSpec::default()) {
                    return Err(Error::Config(
                        "dataset= conflicts with earlier synthetic settings".into(),
                    ));
                }
                self.source = DataSource::Directory { path: PathBuf::from(value) };
            }
            "synthetic_identities" => synth(&mut |s| {
                s.identities = parse_usize()?;
                Ok(())
            })?,
            "synthetic_min_len" => synth(&mut |s| {
                s.min_len = parse_usize()?;
                Ok(())
            })?,
            "synthetic_max_len" => synth(&mut |s| {
                s.max_len = parse_usize()?;
                Ok(())
            })?,
            "synthetic_seed" => synth(&mut |s| {
                s.seed = value.parse::<u64>().map_err(|_| bad("seed"))?;
                Ok(())
            })?,
            "cam2_brightness" => synth(&mut |s| {
                s.cam2_brightness = parse_f64()?;
                Ok(())
            })?,
            "cam2_contrast" => synth(&mut |s| {
                s.cam2_contrast = parse_f64()?;
                Ok(())
            })?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "max_len" => self.max_len = parse_usize()?,
            "repetitions" => self.repetitions = parse_usize()?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses flat `key=value` text (blank lines and `#` comments allowed)
    /// over the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", no + 1)))?;
            cfg.apply(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let DataSource::Synthetic(spec) = &self.source {
            spec.validate()?;
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be >= 1".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        Ok(())
    }

    /// The `run.json` payload: the full resolved config.
    pub fn to_run_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Human-oriented summary of the synthetic spec for logs.
pub fn describe_source(source: &DataSource) -> String {
    let mut s = String::new();
    match source {
        DataSource::Synthetic(spec) => {
            let _ = write!(
                s,
                "synthetic: {} identities, lengths {}..{}, seed {}",
                spec.identities, spec.min_len, spec.max_len, spec.seed
            );
        }
        DataSource::Directory { path } => {
            let _ = write!(s, "dataset: {}", path.display());
        }
    }
    s
}
