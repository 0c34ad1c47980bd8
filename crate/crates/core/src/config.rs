//! Model hyperparameters, the built-in dataset presets, and the flat
//! `key = value` run configuration format.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::train::{ScheduleKind, TrainConfig};

/// Architecture variants. Everything except `Full` removes or swaps one
/// component for ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// No frequency branch in the context sub-layer.
    SpatialOnly,
    /// No 9x9 spatial branch in the context sub-layer.
    FrequencyOnly,
    /// Temporal difference injection removed; latent projections kept.
    NoTdi,
    /// Conv3x3 + 2x2 average pooling instead of each DWT stage, nearest
    /// upsampling + Conv3x3 instead of each IDWT stage.
    ConvCodec,
    /// Pointwise -> GELU -> pointwise instead of gated channel interaction.
    MlpMixer,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::SpatialOnly,
        Variant::FrequencyOnly,
        Variant::NoTdi,
        Variant::ConvCodec,
        Variant::MlpMixer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SpatialOnly => "spatial_only",
            Variant::FrequencyOnly => "frequency_only",
            Variant::NoTdi => "no_tdi",
            Variant::ConvCodec => "conv_codec",
            Variant::MlpMixer => "mlp_mixer",
        }
    }

    pub fn has_spatial_branch(self) -> bool {
        self != Variant::FrequencyOnly
    }

    pub fn has_frequency_branch(self) -> bool {
        self != Variant::SpatialOnly
    }

    pub fn has_tdi(self) -> bool {
        self != Variant::NoTdi
    }

    pub fn wavelet_codec(self) -> bool {
        self != Variant::ConvCodec
    }

    pub fn gated_mixing(self) -> bool {
        self != Variant::MlpMixer
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Wavelet stages.
    pub n_s: usize,
    /// Stacked translator blocks.
    pub n_t: usize,
    /// Codec width (also the stem width).
    pub c_s: usize,
    /// Per-frame latent width; the packed width is `t_in * c_z`.
    pub c_z: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub variant: Variant,
    pub droppath: f64,
    pub seed: u64,
}

/// One row of the reference configuration table, with its training setup.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub model: ModelConfig,
    pub c_t: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub schedule: ScheduleKind,
}

#[allow(clippy::too_many_arguments)]
const fn row(
    name: &'static str,
    n_s: usize,
    n_t: usize,
    c_s: usize,
    c_t: usize,
    chw: (usize, usize, usize),
    t_in: usize,
    t_out: usize,
    lr: f64,
    epochs: usize,
    schedule: ScheduleKind,
) -> Preset {
    Preset {
        name,
        model: ModelConfig {
            n_s,
            n_t,
            c_s,
            c_z: c_t / t_in,
            channels: chw.0,
            height: chw.1,
            width: chw.2,
            t_in,
            t_out,
            variant: Variant::Full,
            droppath: 0.0,
            seed: 0,
        },
        c_t,
        batch_size: 16,
        lr,
        epochs,
        schedule,
    }
}

pub const PRESETS: [Preset; 7] = [
    row("moving_mnist", 2, 8, 64, 720, (1, 64, 64), 10, 10, 9.2e-4, 2000, ScheduleKind::OneCycle),
    row("taxibj", 1, 8, 32, 192, (2, 32, 32), 4, 4, 1.5e-3, 50, ScheduleKind::Cosine),
    row("weatherbench_t2m", 1, 8, 32, 264, (1, 32, 64), 12, 12, 2e-3, 50, ScheduleKind::Cosine),
    row("weatherbench_tcc", 1, 8, 32, 264, (1, 32, 64), 12, 12, 4e-3, 50, ScheduleKind::Cosine),
    row("weatherbench_uv10", 1, 8, 32, 264, (2, 32, 64), 12, 12, 2e-3, 50, ScheduleKind::Cosine),
    row("weatherbench_r", 1, 8, 32, 264, (1, 32, 64), 12, 12, 3e-3, 50, ScheduleKind::Cosine),
    row("weatherbench_mv", 1, 8, 32, 264, (12, 32, 64), 4, 4, 3e-3, 50, ScheduleKind::Cosine),
];

pub fn preset(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

impl ModelConfig {
    /// The desk-scale configuration used for overfitting and CLI smoke runs.
    pub fn micro() -> Self {
        ModelConfig {
            n_s: 1,
            n_t: 2,
            c_s: 16,
            c_z: 8,
            channels: 1,
            height: 16,
            width: 16,
            t_in: 4,
            t_out: 4,
            variant: Variant::Full,
            droppath: 0.0,
            seed: 0,
        }
    }

    /// Packed translator width.
    pub fn c_t(&self) -> usize {
        self.t_in * self.c_z
    }

    pub fn latent_height(&self) -> usize {
        self.height >> self.n_s
    }

    pub fn latent_width(&self) -> usize {
        self.width >> self.n_s
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_t", self.n_t),
            ("c_s", self.c_s),
            ("c_z", self.c_z),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("t_in", self.t_in),
            ("t_out", self.t_out),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if self.n_s >= usize::BITS as usize {
            return Err(Error::config("n_s", "too many stages"));
        }
        let factor = 1usize << self.n_s;
        if !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::Indivisible {
                height: self.height,
                width: self.width,
                factor,
            });
        }
        if !(0.0..1.0).contains(&self.droppath) {
            return Err(Error::config("droppath", "must be in [0, 1)"));
        }
        Ok(())
    }

    /// Stable `key=value` rendering used in checkpoint manifests.
    pub fn to_manifest(&self) -> String {
        format!(
            "n_s={}\nn_t={}\nc_s={}\nc_z={}\nchannels={}\nheight={}\nwidth={}\nt_in={}\nt_out={}\nvariant={}\ndroppath={}\nseed={}\n",
            self.n_s,
            self.n_t,
            self.c_s,
            self.c_z,
            self.channels,
            self.height,
            self.width,
            self.t_in,
            self.t_out,
            self.variant,
            self.droppath,
            self.seed
        )
    }
}

/// Everything a CLI command needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

const KEYS: &[&str] = &[
    "preset",
    "n_s",
    "n_t",
    "c_s",
    "c_t",
    "c_z",
    "channels",
    "height",
    "width",
    "t_in",
    "t_out",
    "variant",
    "droppath",
    "seed",
    "lr",
    "epochs",
    "max_steps",
    "batch_size",
    "schedule",
    "shuffle_seed",
    "eval_every",
    "grad_clip",
    "data_dir",
    "n_train",
    "n_val",
    "n_test",
    "seq_len",
    "n_objects",
    "object_size",
    "data_seed",
    "out_dir",
];

fn parse_value<V: FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{raw}`")))
}

impl RunConfig {
    /// Parses the flat `key = value` format. `#` starts a comment; unknown
    /// or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, got `{line}`"),
                ));
            };
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::config(k, "unknown key"));
            }
            if pairs.iter().any(|(seen, _)| *seen == k) {
                return Err(Error::config(k, "given more than once"));
            }
            pairs.push((k, v));
        }
        let get = |key: &str| pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());

        let base = match get("preset") {
            Some(name) => Some(preset(name).ok_or_else(|| Error::config("preset", format!("unknown preset `{name}`")))?),
            None => None,
        };
        let require = |key: &str, fallback: Option<usize>| -> Result<usize> {
            match get(key) {
                Some(raw) => parse_value(key, raw),
                None => fallback.ok_or_else(|| Error::config(key, "missing required key")),
            }
        };
        let bm = base.map(|p| &p.model);
        let t_in = require("t_in", bm.map(|m| m.t_in))?;
        if t_in == 0 {
            return Err(Error::config("t_in", "must be >= 1"));
        }
        let c_z = match (get("c_z"), get("c_t")) {
            (Some(_), Some(_)) => return Err(Error::config("c_z", "give either c_z or c_t, not both")),
            (Some(raw), None) => parse_value("c_z", raw)?,
            (None, Some(raw)) => {
                let c_t: usize = parse_value("c_t", raw)?;
                if !c_t.is_multiple_of(t_in) {
                    return Err(Error::config("c_t", format!("{c_t} is not divisible by t_in={t_in}")));
                }
                c_t / t_in
            }
            (None, None) => match base {
                Some(p) if p.model.t_in == t_in => p.model.c_z,
                Some(p) if p.c_t % t_in == 0 => p.c_t / t_in,
                _ => return Err(Error::config("c_t", "missing required key")),
            },
        };
        let model = ModelConfig {
            n_s: require("n_s", bm.map(|m| m.n_s))?,
            n_t: require("n_t", bm.map(|m| m.n_t))?,
            c_s: require("c_s", bm.map(|m| m.c_s))?,
            c_z,
            channels: require("channels", bm.map(|m| m.channels))?,
            height: require("height", bm.map(|m| m.height))?,
            width: require("width", bm.map(|m| m.width))?,
            t_in,
            t_out: require("t_out", Some(bm.map_or(t_in, |m| m.t_out)))?,
            variant: get("variant").map_or(Ok(Variant::Full), |v| v.parse().map_err(|_| Error::config("variant", format!("unknown variant `{v}`"))))?,
            droppath: get("droppath").map_or(Ok(0.0), |v| parse_value("droppath", v))?,
            seed: get("seed").map_or(Ok(0), |v| parse_value("seed", v))?,
        };
        model.validate()?;

        let mut train = TrainConfig::default();
        if let Some(p) = base {
            train.lr = p.lr;
            train.epochs = p.epochs;
            train.batch_size = p.batch_size;
            train.schedule = p.schedule;
        }
        if let Some(v) = get("lr") {
            train.lr = parse_value("lr", v)?;
        }
        if let Some(v) = get("epochs") {
            train.epochs = parse_value("epochs", v)?;
        }
        if let Some(v) = get("max_steps") {
            train.max_steps = Some(parse_value("max_steps", v)?);
        }
        if let Some(v) = get("batch_size") {
            train.batch_size = parse_value("batch_size", v)?;
        }
        if let Some(v) = get("schedule") {
            train.schedule = v.parse().map_err(|_| Error::config("schedule", format!("unknown schedule `{v}`")))?;
        }
        if let Some(v) = get("shuffle_seed") {
            train.shuffle_seed = parse_value("shuffle_seed", v)?;
        }
        if let Some(v) = get("eval_every") {
            train.eval_every = parse_value("eval_every", v)?;
        }
        if let Some(v) = get("grad_clip") {
            train.grad_clip = Some(parse_value("grad_clip", v)?);
        }
        if !(train.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if train.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }

        let mut data = DataConfig::for_model(&model);
        if let Some(v) = get("data_dir") {
            data.data_dir = Some(PathBuf::from(v));
        }
        if let Some(v) = get("n_train") {
            data.n_train = parse_value("n_train", v)?;
        }
        if let Some(v) = get("n_val") {
            data.n_val = parse_value("n_val", v)?;
        }
        if let Some(v) = get("n_test") {
            data.n_test = parse_value("n_test", v)?;
        }
        if let Some(v) = get("seq_len") {
            data.seq_len = parse_value("seq_len", v)?;
        }
        if let Some(v) = get("n_objects") {
            data.n_objects = parse_value("n_objects", v)?;
        }
        if let Some(v) = get("object_size") {
            data.object_size = parse_value("object_size", v)?;
        }
        if let Some(v) = get("data_seed") {
            data.seed = parse_value("data_seed", v)?;
        }
        if data.seq_len < model.t_in + model.t_out {
            return Err(Error::config(
                "seq_len",
                format!("{} is shorter than t_in + t_out = {}", data.seq_len, model.t_in + model.t_out),
            ));
        }

        let out_dir = PathBuf::from(get("out_dir").unwrap_or("runs/default"));
        Ok(RunConfig {
            model,
            train,
            data,
            out_dir,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
