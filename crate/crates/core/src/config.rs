//! Model hyperparameters and the flat `section.key = value` config format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Windowed-attention encoder layout (Swin-T by default).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub patch_size: usize,
    /// Stage `i` has `embed_dim · 2^i` channels.
    pub embed_dim: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    pub mlp_ratio: usize,
    pub relative_position_bias: bool,
    /// Alternate blocks use shifted windows; `false` disables shifting everywhere.
    pub shift: bool,
}

impl EncoderConfig {
    pub fn swin_tiny(in_channels: usize) -> Self {
        EncoderConfig {
            in_channels,
            patch_size: 4,
            embed_dim: 96,
            depths: [2, 2, 6, 2],
            heads: [3, 6, 12, 24],
            window: 7,
            mlp_ratio: 4,
            relative_position_bias: true,
            shift: true,
        }
    }

    pub fn channels(&self) -> [usize; 4] {
        [
            self.embed_dim,
            self.embed_dim * 2,
            self.embed_dim * 4,
            self.embed_dim * 8,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextConfig {
    pub aspp_rates: Vec<usize>,
    pub aspp_branch_channels: usize,
    /// 1×1 conv on the global-pooling branch before the ReLU.
    pub aspp_gap_conv: bool,
    /// `C_a`, width of the projected ASPP output.
    pub aspp_channels: usize,
    pub psp_scales: Vec<usize>,
    pub psp_branch_channels: usize,
    /// Also concatenate the unpooled feature map (PSPNet style).
    pub psp_identity_branch: bool,
    /// `C_p`, width of the projected PSP output.
    pub psp_channels: usize,
}

/// How the channel and spatial maps recalibrate the bottleneck output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineMode {
    /// `z ⊙ A_c ⊙ A_s + z`
    Maps,
    /// `(z ⊙ A_c) ⊙ (z ⊙ A_s) + z`
    Separate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Largest H·W accepted by full-resolution cross-attention.
    pub max_tokens: usize,
    pub bottleneck_channels: usize,
    /// `None` picks the odd kernel nearest to `log2(C)/2 + 1/2`.
    pub eca_kernel: Option<usize>,
    pub sa_kernel: usize,
    pub combine: CombineMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub stage_channels: [usize; 4],
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub context: ContextConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub seed: u64,
    pub precision: Precision,
}

pub const NUM_CLASSES: usize = 4;

/// Nearest odd integer to `|log2(C)/2 + 1/2|`, rounding even values up.
pub fn eca_kernel_for(channels: usize) -> usize {
    let t = ((channels as f64).log2() / 2.0 + 0.5).abs() as usize;
    if t % 2 == 1 {
        t
    } else {
        t + 1
    }
}

impl ModelConfig {
    /// Full-size network: Swin-T encoder with the [96, 192, 384, 768] pyramid.
    pub fn full(in_channels: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig::swin_tiny(in_channels),
            context: ContextConfig {
                aspp_rates: vec![1, 6, 12, 18],
                aspp_branch_channels: 512,
                aspp_gap_conv: true,
                aspp_channels: 256,
                psp_scales: vec![1, 2, 3, 6],
                psp_branch_channels: 128,
                psp_identity_branch: false,
                psp_channels: 256,
            },
            fusion: FusionConfig {
                d_model: 256,
                heads: 8,
                max_tokens: 4096,
                bottleneck_channels: 256,
                eca_kernel: None,
                sa_kernel: 7,
                combine: CombineMode::Maps,
            },
            decoder: DecoderConfig {
                stage_channels: [256, 128, 64, 32],
                num_classes: NUM_CLASSES,
            },
            seed: 0,
            precision: Precision::F32,
        }
    }

    /// Laptop-scale preset: window 4, depths [1, 1, 2, 1] and narrow widths.
    pub fn desk(in_channels: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                in_channels,
                patch_size: 4,
                embed_dim: 32,
                depths: [1, 1, 2, 1],
                heads: [1, 2, 4, 8],
                window: 4,
                mlp_ratio: 4,
                relative_position_bias: true,
                shift: true,
            },
            context: ContextConfig {
                aspp_rates: vec![1, 6, 12, 18],
                aspp_branch_channels: 128,
                aspp_gap_conv: true,
                aspp_channels: 128,
                // f3 is 4×4 for a 64×64 tile, so the pooling grid stops at 4
                psp_scales: vec![1, 2, 3, 4],
                psp_branch_channels: 32,
                psp_identity_branch: false,
                psp_channels: 128,
            },
            fusion: FusionConfig {
                d_model: 128,
                heads: 4,
                max_tokens: 4096,
                bottleneck_channels: 128,
                eca_kernel: None,
                sa_kernel: 7,
                combine: CombineMode::Maps,
            },
            decoder: DecoderConfig {
                stage_channels: [256, 128, 64, 64],
                num_classes: NUM_CLASSES,
            },
            seed: 0,
            precision: Precision::F32,
        }
    }

    /// Minimal preset used by gradient checks.
    pub fn tiny(in_channels: usize) -> Self {
        let mut c = Self::desk(in_channels);
        c.encoder.embed_dim = 4;
        c.encoder.depths = [1, 1, 1, 1];
        c.encoder.heads = [1, 1, 2, 2];
        c.encoder.window = 2;
        c.encoder.mlp_ratio = 2;
        c.context.aspp_rates = vec![1, 2];
        c.context.aspp_branch_channels = 4;
        c.context.aspp_channels = 4;
        c.context.psp_scales = vec![1, 2];
        c.context.psp_branch_channels = 3;
        c.context.psp_channels = 4;
        c.fusion.d_model = 4;
        c.fusion.heads = 2;
        c.fusion.bottleneck_channels = 4;
        c.fusion.sa_kernel = 3;
        c.decoder.stage_channels = [4, 4, 3, 3];
        c
    }

    pub fn query_channels(&self) -> usize {
        self.context.aspp_channels + self.context.psp_channels
    }

    pub fn eca_kernel(&self) -> usize {
        self.fusion
            .eca_kernel
            .unwrap_or_else(|| eca_kernel_for(self.query_channels()))
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let err = |m: String| Err(Error::Config(m));
        if e.in_channels == 0
            || e.patch_size == 0
            || e.embed_dim == 0
            || e.window == 0
            || e.mlp_ratio == 0
        {
            return err("encoder sizes must be positive".into());
        }
        for (i, (&dim, &h)) in e.channels().iter().zip(&e.heads).enumerate() {
            if h == 0 || dim % h != 0 {
                return err(format!(
                    "encoder stage {} width {dim} not divisible by {h} heads",
                    i + 1
                ));
            }
            if e.depths[i] == 0 {
                return err(format!("encoder stage {} has depth 0", i + 1));
            }
        }
        let c = &self.context;
        if c.aspp_rates.is_empty() || c.aspp_rates.contains(&0) {
            return err("context.aspp_rates must be positive".into());
        }
        let mut r = c.aspp_rates.clone();
        r.sort_unstable();
        r.dedup();
        if r.len() != c.aspp_rates.len() {
            return err("context.aspp_rates must be distinct".into());
        }
        if c.psp_scales.is_empty()
            || c.psp_scales.contains(&0)
            || c.psp_scales.windows(2).any(|w| w[0] >= w[1])
        {
            return err("context.psp_scales must be positive and ascending".into());
        }
        if c.aspp_branch_channels == 0
            || c.aspp_channels == 0
            || c.psp_branch_channels == 0
            || c.psp_channels == 0
        {
            return err("context widths must be positive".into());
        }
        let f = &self.fusion;
        if f.heads == 0 || !f.d_model.is_multiple_of(f.heads) {
            return err(format!(
                "fusion.d_model {} not divisible by fusion.heads {}",
                f.d_model, f.heads
            ));
        }
        if f.bottleneck_channels == 0 || f.max_tokens == 0 {
            return err("fusion widths must be positive".into());
        }
        if f.sa_kernel.is_multiple_of(2) {
            return err(format!("fusion.sa_kernel must be odd, got {}", f.sa_kernel));
        }
        if let Some(k) = f.eca_kernel {
            if k % 2 == 0 {
                return err(format!("fusion.eca_kernel must be odd, got {k}"));
            }
        }
        let d = &self.decoder;
        if d.num_classes != NUM_CLASSES {
            return err(format!(
                "decoder.num_classes must be {NUM_CLASSES}, got {}",
                d.num_classes
            ));
        }
        if d.stage_channels.contains(&0) {
            return err("decoder.stage_channels must be positive".into());
        }
        Ok(())
    }

    /// Every field as `section.key = value` lines, in a stable order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let e = &self.encoder;
        let c = &self.context;
        let f = &self.fusion;
        let d = &self.decoder;
        let kv = [
            ("encoder.in_channels", e.in_channels.to_string()),
            ("encoder.patch_size", e.patch_size.to_string()),
            ("encoder.embed_dim", e.embed_dim.to_string()),
            ("encoder.depths", list(&e.depths)),
            ("encoder.heads", list(&e.heads)),
            ("encoder.window", e.window.to_string()),
            ("encoder.mlp_ratio", e.mlp_ratio.to_string()),
            (
                "encoder.relative_position_bias",
                e.relative_position_bias.to_string(),
            ),
            ("encoder.shift", e.shift.to_string()),
            ("context.aspp_rates", list(&c.aspp_rates)),
            (
                "context.aspp_branch_channels",
                c.aspp_branch_channels.to_string(),
            ),
            ("context.aspp_gap_conv", c.aspp_gap_conv.to_string()),
            ("context.aspp_channels", c.aspp_channels.to_string()),
            ("context.psp_scales", list(&c.psp_scales)),
            (
                "context.psp_branch_channels",
                c.psp_branch_channels.to_string(),
            ),
            (
                "context.psp_identity_branch",
                c.psp_identity_branch.to_string(),
            ),
            ("context.psp_channels", c.psp_channels.to_string()),
            ("fusion.d_model", f.d_model.to_string()),
            ("fusion.heads", f.heads.to_string()),
            ("fusion.max_tokens", f.max_tokens.to_string()),
            (
                "fusion.bottleneck_channels",
                f.bottleneck_channels.to_string(),
            ),
            (
                "fusion.eca_kernel",
                f.eca_kernel.map_or("auto".to_string(), |k| k.to_string()),
            ),
            ("fusion.sa_kernel", f.sa_kernel.to_string()),
            (
                "fusion.combine",
                match f.combine {
                    CombineMode::Maps => "maps",
                    CombineMode::Separate => "separate",
                }
                .to_string(),
            ),
            ("decoder.stage_channels", list(&d.stage_channels)),
            ("decoder.num_classes", d.num_classes.to_string()),
            ("model.seed", self.seed.to_string()),
            (
                "model.precision",
                match self.precision {
                    Precision::F32 => "f32",
                    Precision::F64 => "f64",
                }
                .to_string(),
            ),
        ];
        kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_kv() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Build from a preset (`model.preset = full|desk|tiny`, default full) and
    /// `encoder.* / context.* / fusion.* / decoder.* / model.*` overrides.
    pub fn from_kv(kv: &mut KvFile) -> Result<Self> {
        let in_channels = kv.take_parsed("encoder.in_channels")?.unwrap_or(13);
        let mut cfg = match kv.take("model.preset").as_deref() {
            None | Some("full") => ModelConfig::full(in_channels),
            Some("desk") => ModelConfig::desk(in_channels),
            Some("tiny") => ModelConfig::tiny(in_channels),
            Some(other) => return Err(Error::Config(format!("unknown model.preset {other:?}"))),
        };
        for (key, _) in cfg.to_kv() {
            if key == "encoder.in_channels" {
                continue;
            }
            if let Some(v) = kv.take(&key) {
                cfg.set(&key, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',').map(|p| num(key, p)).collect()
        }
        fn four(key: &str, v: &str) -> Result<[usize; 4]> {
            let l = list(key, v)?;
            l.try_into().map_err(|l: Vec<usize>| {
                Error::Config(format!("{key}: expected 4 values, got {}", l.len()))
            })
        }
        match key {
            "encoder.patch_size" => self.encoder.patch_size = num(key, value)?,
            "encoder.embed_dim" => self.encoder.embed_dim = num(key, value)?,
            "encoder.depths" => self.encoder.depths = four(key, value)?,
            "encoder.heads" => self.encoder.heads = four(key, value)?,
            "encoder.window" => self.encoder.window = num(key, value)?,
            "encoder.mlp_ratio" => self.encoder.mlp_ratio = num(key, value)?,
            "encoder.relative_position_bias" => {
                self.encoder.relative_position_bias = num(key, value)?
            }
            "encoder.shift" => self.encoder.shift = num(key, value)?,
            "context.aspp_rates" => self.context.aspp_rates = list(key, value)?,
            "context.aspp_branch_channels" => self.context.aspp_branch_channels = num(key, value)?,
            "context.aspp_gap_conv" => self.context.aspp_gap_conv = num(key, value)?,
            "context.aspp_channels" => self.context.aspp_channels = num(key, value)?,
            "context.psp_scales" => self.context.psp_scales = list(key, value)?,
            "context.psp_branch_channels" => self.context.psp_branch_channels = num(key, value)?,
            "context.psp_identity_branch" => self.context.psp_identity_branch = num(key, value)?,
            "context.psp_channels" => self.context.psp_channels = num(key, value)?,
            "fusion.d_model" => self.fusion.d_model = num(key, value)?,
            "fusion.heads" => self.fusion.heads = num(key, value)?,
            "fusion.max_tokens" => self.fusion.max_tokens = num(key, value)?,
            "fusion.bottleneck_channels" => self.fusion.bottleneck_channels = num(key, value)?,
            "fusion.eca_kernel" => {
                self.fusion.eca_kernel = if value.trim() == "auto" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            "fusion.sa_kernel" => self.fusion.sa_kernel = num(key, value)?,
            "fusion.combine" => {
                self.fusion.combine = match value.trim() {
                    "maps" => CombineMode::Maps,
                    "separate" => CombineMode::Separate,
                    other => return Err(Error::Config(format!("{key}: unknown mode {other:?}"))),
                }
            }
            "decoder.stage_channels" => self.decoder.stage_channels = four(key, value)?,
            "decoder.num_classes" => self.decoder.num_classes = num(key, value)?,
            "model.seed" => self.seed = num(key, value)?,
            "model.precision" => {
                self.precision = match value.trim() {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    other => {
                        return Err(Error::Config(format!("{key}: unknown precision {other:?}")))
                    }
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// First field that differs from `other`, as `(key, ours, theirs)`.
    pub fn first_difference(&self, other: &ModelConfig) -> Option<(String, String, String)> {
        self.to_kv()
            .into_iter()
            .zip(other.to_kv())
            .find(|((_, a), (_, b))| a != b)
            .map(|((k, a), (_, b))| (k, a, b))
    }
}

/// Parsed `section.key = value` file. `#` starts a comment. Keys are consumed
/// with `take*`, so leftovers can be reported as unknown.
#[derive(Debug, Clone, Default)]
pub struct KvFile {
    source: Option<PathBuf>,
    entries: BTreeMap<String, (usize, String)>,
}

impl KvFile {
    pub fn parse(text: &str, source: Option<&Path>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let perr = |line: usize, msg: String| Error::Parse {
            path: source
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("<config>")),
            msg: format!("line {line}: {msg}"),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                perr(
                    i + 1,
                    format!("expected `section.key = value`, got {line:?}"),
                )
            })?;
            let k = k.trim();
            if !k.contains('.') || k.contains(char::is_whitespace) {
                return Err(perr(
                    i + 1,
                    format!("key {k:?} is not of the form section.key"),
                ));
            }
            if entries
                .insert(k.to_string(), (i + 1, v.trim().to_string()))
                .is_some()
            {
                return Err(perr(i + 1, format!("duplicate key {k}")));
            }
        }
        Ok(KvFile {
            source: source.map(Path::to_path_buf),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, Some(path))
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), (0, value.into()));
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    pub fn take_parsed<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    /// Error on any key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Config(format!("unknown key {k} (line {line})"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eca_kernel_rule() {
        assert_eq!(eca_kernel_for(512), 5);
        assert_eq!(eca_kernel_for(128), 5); // 3.5+.5 = 4 -> 5
        assert_eq!(eca_kernel_for(64), 3);
        assert_eq!(eca_kernel_for(8), 3);
    }

    #[test]
    fn presets_validate() {
        ModelConfig::full(13).validate().unwrap();
        ModelConfig::full(11).validate().unwrap();
        ModelConfig::desk(13).validate().unwrap();
        ModelConfig::tiny(3).validate().unwrap();
        assert_eq!(
            ModelConfig::full(13).encoder.channels(),
            [96, 192, 384, 768]
        );
        assert_eq!(ModelConfig::full(13).query_channels(), 512);
    }

    #[test]
    fn kv_roundtrip_and_overrides() {
        let cfg = ModelConfig::desk(11);
        let mut kv = KvFile::parse(&cfg.to_text(), None).unwrap();
        assert_eq!(ModelConfig::from_kv(&mut kv).unwrap(), cfg);
        kv.finish().unwrap();

        let text = "model.preset = desk\nencoder.in_channels = 11\nencoder.window = 2 # comment\n";
        let mut kv = KvFile::parse(text, None).unwrap();
        let c = ModelConfig::from_kv(&mut kv).unwrap();
        assert_eq!(c.encoder.window, 2);
        assert_eq!(c.encoder.in_channels, 11);
    }

    #[test]
    fn bad_config_is_rejected() {
        assert!(KvFile::parse("no equals sign", None).is_err());
        assert!(KvFile::parse("a.b = 1\na.b = 2", None).is_err());
        let mut kv = KvFile::parse("fusion.heads = 7", None).unwrap();
        assert!(ModelConfig::from_kv(&mut kv).is_err());
        let mut kv = KvFile::parse("decoder.num_classes = 5", None).unwrap();
        assert!(ModelConfig::from_kv(&mut kv).is_err());
        let mut kv = KvFile::parse("train.bogus = 1", None).unwrap();
        ModelConfig::from_kv(&mut kv).unwrap();
        assert!(kv.finish().is_err());
    }

    #[test]
    fn first_difference_names_field() {
        let a = ModelConfig::desk(13);
        let mut b = a.clone();
        b.decoder.num_classes = 5;
        assert_eq!(a.first_difference(&b).unwrap().0, "decoder.num_classes");
    }
}
