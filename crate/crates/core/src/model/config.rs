use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::AttentionMode;

/// The five prediction tasks, in registry order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Rr,
    Age,
    Sex,
    Ka,
    Ad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Regression,
    Binary,
    Multiclass(usize),
}

pub const NUM_TASKS: usize = 5;

impl Task {
    pub const ALL: [Task; NUM_TASKS] = [Task::Rr, Task::Age, Task::Sex, Task::Ka, Task::Ad];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Task> {
        Task::ALL.get(i).copied().ok_or(Error::UnknownTask(i))
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Rr => "rr",
            Task::Age => "age",
            Task::Sex => "sex",
            Task::Ka => "ka",
            Task::Ad => "ad",
        }
    }

    pub fn kind(self) -> TaskKind {
        match self {
            Task::Rr | Task::Age => TaskKind::Regression,
            Task::Sex | Task::Ka => TaskKind::Binary,
            Task::Ad => TaskKind::Multiclass(crate::signal::templates::NUM_CLASSES),
        }
    }

    pub fn output_dim(self) -> usize {
        match self.kind() {
            TaskKind::Regression | TaskKind::Binary => 1,
            TaskKind::Multiclass(k) => k,
        }
    }

    /// Name of the metric reported for this task.
    pub fn metric_name(self) -> &'static str {
        match self.kind() {
            TaskKind::Regression => "mae",
            TaskKind::Binary => "f1",
            TaskKind::Multiclass(_) => "acc",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config("task", format!("unknown task {s:?} (expected rr, age, sex, ka or ad)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    SpectralFold,
    LinearDecomp,
    PatchTransformer,
    DecompAttention,
    ConvEncoder,
}

impl ExtractorKind {
    pub const ALL: [ExtractorKind; 5] = [
        ExtractorKind::SpectralFold,
        ExtractorKind::LinearDecomp,
        ExtractorKind::PatchTransformer,
        ExtractorKind::DecompAttention,
        ExtractorKind::ConvEncoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExtractorKind::SpectralFold => "spectral_fold",
            ExtractorKind::LinearDecomp => "linear_decomp",
            ExtractorKind::PatchTransformer => "patch_transformer",
            ExtractorKind::DecompAttention => "decomp_attention",
            ExtractorKind::ConvEncoder => "conv_encoder",
        }
    }

    pub fn default_downsample(self) -> usize {
        match self {
            ExtractorKind::SpectralFold | ExtractorKind::LinearDecomp => 1,
            ExtractorKind::PatchTransformer | ExtractorKind::DecompAttention => 2,
            ExtractorKind::ConvEncoder => 4,
        }
    }
}

fn default_extractor_dim() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorSpec {
    pub kind: ExtractorKind,
    /// Defaults per kind when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downsample_factor: Option<usize>,
    #[serde(default = "default_extractor_dim")]
    pub output_dim: usize,
}

impl ExtractorSpec {
    pub fn new(kind: ExtractorKind) -> Self {
        Self {
            kind,
            downsample_factor: None,
            output_dim: default_extractor_dim(),
        }
    }

    pub fn factor(&self) -> usize {
        self.downsample_factor.unwrap_or_else(|| self.kind.default_downsample())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segmentation {
    /// Midpoint windows around detected R-peaks.
    RPeak,
    /// Fixed-length windows that ignore the cardiac cycle.
    FixedWindow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub leads: usize,
    pub extractors: Vec<ExtractorSpec>,
    pub extractor_heads: usize,
    pub patch_len: usize,
    pub trend_kernel: usize,
    pub decomp_bins: usize,
    pub fold_channels: usize,

    pub periodic_branch: bool,
    pub segmentation: Segmentation,
    pub fixed_window_ms: f64,
    pub detection_lead: usize,
    pub beat_len: usize,
    pub morph_kernels: Vec<usize>,
    pub rhythm_dilations: Vec<usize>,
    pub expert_channels: usize,
    pub d_e: usize,
    pub d_p: usize,
    pub d_t: usize,
    pub task_conditioned_gate: bool,
    pub attention_mode: AttentionMode,
    pub attention_heads: usize,
    /// RR values fed to the rhythm experts are `(rr - mean) / std` with these
    /// fixed constants, so the absolute rate stays visible.
    pub rr_norm_mean_ms: f64,
    pub rr_norm_std_ms: f64,

    pub d_h: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub contrastive_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            leads: 1,
            extractors: ExtractorKind::ALL.into_iter().map(ExtractorSpec::new).collect(),
            extractor_heads: 4,
            patch_len: 16,
            trend_kernel: 25,
            decomp_bins: 32,
            fold_channels: 16,
            periodic_branch: true,
            segmentation: Segmentation::RPeak,
            fixed_window_ms: 800.0,
            detection_lead: 0,
            beat_len: crate::beats::DEFAULT_BEAT_LEN,
            morph_kernels: vec![3, 7, 15],
            rhythm_dilations: vec![2, 4],
            expert_channels: 16,
            d_e: 128,
            d_p: 128,
            d_t: 16,
            task_conditioned_gate: true,
            attention_mode: AttentionMode::Hybrid,
            attention_heads: 4,
            rr_norm_mean_ms: 800.0,
            rr_norm_std_ms: 250.0,
            d_h: 64,
            lora_rank: 4,
            lora_alpha: 8.0,
            contrastive_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::config(format!("model.{field}"), msg));
        if self.leads == 0 {
            return fail("leads", "must be >= 1".into());
        }
        if self.extractors.is_empty() {
            return fail("extractors", "at least one extractor is required".into());
        }
        for (i, e) in self.extractors.iter().enumerate() {
            if e.factor() == 0 {
                return fail(&format!("extractors[{i}].downsample_factor"), "must be >= 1".into());
            }
            if e.output_dim == 0 {
                return fail(&format!("extractors[{i}].output_dim"), "must be >= 1".into());
            }
            let needs_heads = matches!(e.kind, ExtractorKind::PatchTransformer | ExtractorKind::DecompAttention);
            if needs_heads && e.output_dim % self.extractor_heads != 0 {
                return fail(
                    &format!("extractors[{i}].output_dim"),
                    format!("{} not divisible by extractor_heads {}", e.output_dim, self.extractor_heads),
                );
            }
        }
        for (name, v) in [
            ("extractor_heads", self.extractor_heads),
            ("patch_len", self.patch_len),
            ("trend_kernel", self.trend_kernel),
            ("decomp_bins", self.decomp_bins),
            ("fold_channels", self.fold_channels),
            ("expert_channels", self.expert_channels),
            ("d_e", self.d_e),
            ("d_p", self.d_p),
            ("d_t", self.d_t),
            ("attention_heads", self.attention_heads),
            ("d_h", self.d_h),
            ("contrastive_dim", self.contrastive_dim),
        ] {
            if v == 0 {
                return fail(name, "must be >= 1".into());
            }
        }
        if self.beat_len < 16 {
            return fail("beat_len", format!("{} must be >= 16", self.beat_len));
        }
        if self.detection_lead >= self.leads {
            return fail("detection_lead", format!("{} must be < leads ({})", self.detection_lead, self.leads));
        }
        if self.morph_kernels.len() != 3 || self.morph_kernels.contains(&0) {
            return fail("morph_kernels", "exactly three positive kernel sizes are required".into());
        }
        if self.rhythm_dilations.len() != 2 || self.rhythm_dilations.contains(&0) {
            return fail("rhythm_dilations", "exactly two positive dilations are required".into());
        }
        if !self.d_e.is_multiple_of(self.attention_heads) {
            return fail("attention_heads", format!("d_e {} not divisible by {}", self.d_e, self.attention_heads));
        }
        if !(self.fixed_window_ms > 0.0 && self.fixed_window_ms.is_finite()) {
            return fail("fixed_window_ms", "must be > 0".into());
        }
        if !(self.rr_norm_std_ms > 0.0 && self.rr_norm_mean_ms.is_finite()) {
            return fail("rr_norm_std_ms", "must be > 0".into());
        }
        if self.lora_rank == 0 || self.lora_rank > self.d_h.min(self.fused_dim()) {
            return fail("lora_rank", format!("{} outside [1, {}]", self.lora_rank, self.d_h.min(self.fused_dim())));
        }
        if !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
            return fail("lora_alpha", "must be > 0".into());
        }
        Ok(())
    }

    /// Width of the multi-model feature F_m.
    pub fn multi_model_dim(&self) -> usize {
        self.extractors.iter().map(|e| e.output_dim).sum()
    }

    /// Width of the fused feature fed to the task trunk.
    pub fn fused_dim(&self) -> usize {
        self.multi_model_dim() + if self.periodic_branch { self.d_p } else { 0 }
    }

    /// Length of the gate's statistics input.
    pub fn stats_dim(&self) -> usize {
        crate::beats::global_stats_dim(self.leads)
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}
