//! Pipeline configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    L1,
}

/// How spatial message passing is realized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialMode {
    /// 3×3 convolution over the patch grid.
    Conv,
    /// Message passing along the similarity-selected spatial edges.
    Edges,
}

/// Neighbour aggregation for temporal messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    _ => Err(format!("expected one of: {}", [$($text),+].join(", "))),
                }
            }
        }
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $($ty::$variant => $text,)+ })
            }
        }
    };
}

keyword_enum!(LossKind { Mse => "mse", L1 => "l1" });
keyword_enum!(SpatialMode { Conv => "conv", Edges => "edges" });
keyword_enum!(Aggregation { Max => "max", Mean => "mean" });
keyword_enum!(Dtype { F32 => "f32", F64 => "f64" });

/// Everything needed to build, run and train a model.
///
/// `None` in an optional field means "derive from the other fields"; the
/// resolved value is available from the accessor of the same name.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub height: usize,
    pub width: usize,
    /// Observed frames T.
    pub frames_in: usize,
    /// Predicted frames per forward pass.
    pub frames_out: usize,
    /// Graph views M, equal to the number of encoder stages.
    pub views: usize,
    pub k: Option<usize>,
    pub k_graph: Option<usize>,
    pub k_decode: Option<usize>,
    pub d_tf: usize,
    pub d_lf: usize,
    pub c_img: usize,
    pub c_view: usize,
    pub c_node: Option<usize>,
    pub c_sr: Option<usize>,
    pub slope: f64,
    pub max_disp: Option<f64>,
    pub gamma: f64,
    pub eps: f64,
    pub sim_eps: f64,
    pub loss: LossKind,
    pub spatial_on: bool,
    pub backward_on: bool,
    pub location_feature_on: bool,
    pub spatial_mode: SpatialMode,
    pub aggregation: Aggregation,
    pub upsample_bypass: bool,
    pub dtype: Dtype,
    pub seed: u64,
    pub lr: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    pub steps: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::ucf_sports()
    }
}

/// `k = min(10, round(1% of the patch count))`, at least 1.
pub fn default_k(hs: usize, ws: usize) -> usize {
    let one_percent = (0.01 * (hs * ws) as f64).round() as usize;
    one_percent.clamp(1, 10)
}

impl PipelineConfig {
    /// 512×512, four observed frames, MSE.
    pub fn ucf_sports() -> Self {
        Self {
            height: 512,
            width: 512,
            frames_in: 4,
            frames_out: 1,
            views: 4,
            k: None,
            k_graph: None,
            k_decode: None,
            d_tf: 16,
            d_lf: 4,
            c_img: 16,
            c_view: 16,
            c_node: None,
            c_sr: None,
            slope: 0.2,
            max_disp: None,
            gamma: 0.5,
            eps: 1e-6,
            sim_eps: 1e-8,
            loss: LossKind::Mse,
            spatial_on: true,
            backward_on: true,
            location_feature_on: true,
            spatial_mode: SpatialMode::Conv,
            aggregation: Aggregation::Max,
            upsample_bypass: true,
            dtype: Dtype::F32,
            seed: 0,
            lr: 1e-3,
            lr_final: 1e-5,
            weight_decay: 1e-2,
            steps: 1000,
        }
    }

    /// 256×832, two observed frames, L1.
    pub fn kitti() -> Self {
        Self {
            height: 256,
            width: 832,
            frames_in: 2,
            d_tf: 32,
            loss: LossKind::L1,
            ..Self::ucf_sports()
        }
    }

    /// 512×1024, two observed frames, L1.
    pub fn cityscapes() -> Self {
        Self {
            height: 512,
            width: 1024,
            frames_in: 2,
            d_tf: 32,
            loss: LossKind::L1,
            ..Self::ucf_sports()
        }
    }

    /// 16×16 desk-scale model: two views, k = 4, narrow channels.
    pub fn toy() -> Self {
        Self {
            height: 16,
            width: 16,
            frames_in: 4,
            views: 2,
            k: Some(4),
            d_tf: 8,
            d_lf: 4,
            c_img: 8,
            c_view: 8,
            dtype: Dtype::F64,
            steps: 200,
            ..Self::ucf_sports()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "ucf" | "ucf_sports" => Some(Self::ucf_sports()),
            "kitti" => Some(Self::kitti()),
            "cityscapes" => Some(Self::cityscapes()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    pub fn downsample(&self) -> usize {
        1 << self.views
    }

    pub fn hs(&self) -> usize {
        self.height / self.downsample()
    }

    pub fn ws(&self) -> usize {
        self.width / self.downsample()
    }

    pub fn k(&self) -> usize {
        self.k.unwrap_or_else(|| default_k(self.hs(), self.ws()))
    }

    pub fn k_graph(&self) -> usize {
        self.k_graph.unwrap_or_else(|| self.k())
    }

    pub fn k_decode(&self) -> usize {
        self.k_decode.unwrap_or_else(|| self.k())
    }

    /// Node feature width `d_mf`.
    pub fn d_mf(&self) -> usize {
        if self.location_feature_on {
            self.d_lf + self.d_tf
        } else {
            self.d_tf
        }
    }

    pub fn c_node(&self) -> usize {
        self.c_node.unwrap_or(self.d_lf + self.d_tf)
    }

    pub fn c_sr(&self) -> usize {
        self.c_sr.unwrap_or_else(|| self.c_node())
    }

    pub fn max_disp(&self) -> f64 {
        self.max_disp
            .unwrap_or(self.height.max(self.width) as f64 / 8.0)
    }

    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.views == 0 || self.views > 10 {
            return fail(format!("views must be in 1..=10, got {}", self.views));
        }
        let d = self.downsample();
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(d) || !self.width.is_multiple_of(d) {
            return fail(format!(
                "height x width = {}x{} must be divisible by 2^views = {d}",
                self.height, self.width
            ));
        }
        if self.frames_in < 2 {
            return fail(format!("frames_in must be at least 2, got {}", self.frames_in));
        }
        if self.frames_out != 1 {
            return fail(format!(
                "frames_out must be 1 (use rollout for longer horizons), got {}",
                self.frames_out
            ));
        }
        let patches = self.hs() * self.ws();
        let kg = self.k_graph();
        if kg == 0 || kg + 1 > patches {
            return fail(format!(
                "k_graph = {kg} must be in 1..={} for a {}x{} patch grid",
                patches.saturating_sub(1),
                self.hs(),
                self.ws()
            ));
        }
        if self.k_decode() == 0 {
            return fail("k_decode must be at least 1".into());
        }
        for (name, v) in [
            ("d_tf", self.d_tf),
            ("d_lf", self.d_lf),
            ("c_img", self.c_img),
            ("c_view", self.c_view),
            ("c_node", self.c_node()),
            ("c_sr", self.c_sr()),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return fail(format!("slope must be in (0, 1), got {}", self.slope));
        }
        if !(self.gamma > 0.0) || !(self.eps > 0.0) || !(self.sim_eps > 0.0) {
            return fail("gamma, eps and sim_eps must be positive".into());
        }
        if !(self.max_disp() > 0.0) {
            return fail("max_disp must be positive".into());
        }
        if self.lr < 0.0 || self.lr_final < 0.0 || self.weight_decay < 0.0 {
            return fail("lr, lr_final and weight_decay must be non-negative".into());
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "preset" {
                if !seen.is_empty() {
                    return Err(Error::Config(format!(
                        "line {}: `preset` must come before other keys",
                        lineno + 1
                    )));
                }
                cfg = Self::preset(value)
                    .ok_or_else(|| Error::Config(format!("line {}: unknown preset `{value}`", lineno + 1)))?;
                continue;
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            cfg.set(key, value)
                .map_err(|m| Error::Config(format!("line {}: key `{key}`: {m}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn parse<V: FromStr>(v: &str) -> std::result::Result<V, String>
        where
            V::Err: std::fmt::Display,
        {
            v.parse::<V>().map_err(|e| format!("cannot parse `{v}`: {e}"))
        }
        fn opt<V: FromStr>(v: &str) -> std::result::Result<Option<V>, String>
        where
            V::Err: std::fmt::Display,
        {
            if v == "auto" {
                Ok(None)
            } else {
                parse(v).map(Some)
            }
        }
        match key {
            "height" => self.height = parse(value)?,
            "width" => self.width = parse(value)?,
            "frames_in" => self.frames_in = parse(value)?,
            "frames_out" => self.frames_out = parse(value)?,
            "views" => self.views = parse(value)?,
            "k" => self.k = opt(value)?,
            "k_graph" => self.k_graph = opt(value)?,
            "k_decode" => self.k_decode = opt(value)?,
            "d_tf" => self.d_tf = parse(value)?,
            "d_lf" => self.d_lf = parse(value)?,
            "c_img" => self.c_img = parse(value)?,
            "c_view" => self.c_view = parse(value)?,
            "c_node" => self.c_node = opt(value)?,
            "c_sr" => self.c_sr = opt(value)?,
            "slope" => self.slope = parse(value)?,
            "max_disp" => self.max_disp = opt(value)?,
            "gamma" => self.gamma = parse(value)?,
            "eps" => self.eps = parse(value)?,
            "sim_eps" => self.sim_eps = parse(value)?,
            "loss" => self.loss = parse(value)?,
            "spatial_on" => self.spatial_on = parse(value)?,
            "backward_on" => self.backward_on = parse(value)?,
            "location_feature_on" => self.location_feature_on = parse(value)?,
            "spatial_mode" => self.spatial_mode = parse(value)?,
            "aggregation" => self.aggregation = parse(value)?,
            "upsample_bypass" => self.upsample_bypass = parse(value)?,
            "dtype" => self.dtype = parse(value)?,
            "seed" => self.seed = parse(value)?,
            "lr" => self.lr = parse(value)?,
            "lr_final" => self.lr_final = parse(value)?,
            "weight_decay" => self.weight_decay = parse(value)?,
            "steps" => self.steps = parse(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Text form accepted by [`PipelineConfig::from_text`].
    pub fn to_text(&self) -> String {
        fn o<V: std::fmt::Display>(v: &Option<V>) -> String {
            v.as_ref().map_or_else(|| "auto".to_string(), |x| x.to_string())
        }
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("height", self.height.to_string());
        kv("width", self.width.to_string());
        kv("frames_in", self.frames_in.to_string());
        kv("frames_out", self.frames_out.to_string());
        kv("views", self.views.to_string());
        kv("k", o(&self.k));
        kv("k_graph", o(&self.k_graph));
        kv("k_decode", o(&self.k_decode));
        kv("d_tf", self.d_tf.to_string());
        kv("d_lf", self.d_lf.to_string());
        kv("c_img", self.c_img.to_string());
        kv("c_view", self.c_view.to_string());
        kv("c_node", o(&self.c_node));
        kv("c_sr", o(&self.c_sr));
        kv("slope", format!("{:?}", self.slope));
        kv("max_disp", self.max_disp.map_or("auto".into(), |v| format!("{v:?}")));
        kv("gamma", format!("{:?}", self.gamma));
        kv("eps", format!("{:?}", self.eps));
        kv("sim_eps", format!("{:?}", self.sim_eps));
        kv("loss", self.loss.to_string());
        kv("spatial_on", self.spatial_on.to_string());
        kv("backward_on", self.backward_on.to_string());
        kv("location_feature_on", self.location_feature_on.to_string());
        kv("spatial_mode", self.spatial_mode.to_string());
        kv("aggregation", self.aggregation.to_string());
        kv("upsample_bypass", self.upsample_bypass.to_string());
        kv("dtype", self.dtype.to_string());
        kv("seed", self.seed.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("lr_final", format!("{:?}", self.lr_final));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("steps", self.steps.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_rule_matches_dataset_table() {
        assert_eq!(default_k(32, 32), 10);
        assert_eq!(default_k(16, 52), 8);
        assert_eq!(default_k(32, 64), 10);
        assert_eq!(default_k(4, 4), 1);
        assert_eq!(PipelineConfig::ucf_sports().k(), 10);
        assert_eq!(PipelineConfig::kitti().k(), 8);
        assert_eq!(PipelineConfig::cityscapes().k(), 10);
    }

    #[test]
    fn presets_validate() {
        for p in ["ucf", "kitti", "cityscapes", "toy"] {
            PipelineConfig::preset(p).unwrap().validate().unwrap();
        }
        let u = PipelineConfig::ucf_sports();
        assert_eq!((u.hs(), u.ws(), u.c_node()), (32, 32, 20));
        let k = PipelineConfig::kitti();
        assert_eq!((k.hs(), k.ws(), k.d_tf, k.d_lf), (16, 52, 32, 4));
    }

    #[test]
    fn text_roundtrip() {
        let mut cfg = PipelineConfig::toy();
        cfg.k_decode = Some(2);
        cfg.spatial_mode = SpatialMode::Edges;
        let back = PipelineConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn parse_errors_name_the_key() {
        let e = PipelineConfig::from_text("preset = toy\nbogus = 1\n").unwrap_err().to_string();
        assert!(e.contains("bogus") && e.contains("unknown key"), "{e}");
        let e = PipelineConfig::from_text("height = ten").unwrap_err().to_string();
        assert!(e.contains("height"), "{e}");
        let e = PipelineConfig::from_text("preset = toy\nheight = 18\n").unwrap_err().to_string();
        assert!(e.contains("divisible"), "{e}");
        let e = PipelineConfig::from_text("loss = lpips").unwrap_err().to_string();
        assert!(e.contains("mse, l1"), "{e}");
    }

    #[test]
    fn comments_and_auto_values() {
        let cfg = PipelineConfig::from_text("# header\npreset = toy  # tiny\nk = auto\n\nseed = 9\n").unwrap();
        assert_eq!(cfg.k, None);
        assert_eq!(cfg.k(), 1);
        assert_eq!(cfg.seed, 9);
    }
}
