//! Text run configuration.
//!
//! The format is sectioned `key = value` text: `[section]` headers, one pair
//! per line, `#` comments, comma-separated integer lists. `emit` materializes
//! every field, so the emitted form is a complete manifest of a run and
//! `parse(emit(c)) == c` exactly (floats print in round-trip form). Named
//! presets cover the benchmark rows the flops command reproduces; parsing a
//! user file starts from defaults (or a preset via `base = <name>`) and
//! overrides the keys present.

use std::fmt::Write as _;

use crate::decoder::{CachePolicy, Geometry, RecacheTiming, SamplerConfig};
use crate::error::{Error, Result};
use crate::flops::{FlopsQuery, ModelDims};
use crate::nested::NestedConfig;
use crate::schedules::{DecodeSchedule, SamplerSchedule};
use crate::trainer::{LossMode, TrainConfig};

/// Fully resolved configuration for every command. Section and field docs
/// live on the emitted manifest; the struct mirrors it one key per field.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [model]
    pub num_layers: usize,
    pub hidden: usize,
    pub mlp_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub max_positions: usize,
    pub factors: Vec<usize>,
    // [schedule]
    pub schedule: String,
    pub cache: CachePolicy,
    pub recache: RecacheTiming,
    pub refresh_at: Vec<usize>,
    // [sampler]
    pub mask_temp: f64,
    pub guidance_scale: f64,
    pub guidance_last: usize,
    pub stemp_bias: f64,
    pub stemp_scale: f64,
    pub seed: u64,
    // [generate]
    pub geometry: String,
    pub class_id: u32,
    pub count: usize,
    pub cond_tokens: usize,
    // [trainer]
    pub total_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub min_lr_fraction: f64,
    pub label_drop_prob: f64,
    pub loss_mode: LossMode,
    pub train_seed: u64,
    pub source_seed: u64,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub eval_seed: u64,
    // [flops]
    pub dims: String,
    pub total_tokens: usize,
    pub flops_cond_tokens: usize,
    // [output]
    pub out_dir: String,
}

impl Default for RunConfig {
    /// Desk-scale defaults: the tuned toy model and training recipe, an
    /// unguided scale-down decode on a 4x4 grid, and the 257-token
    /// class-conditional image cost query.
    fn default() -> Self {
        RunConfig {
            num_layers: 2,
            hidden: 64,
            mlp_dim: 128,
            num_heads: 4,
            head_dim: 16,
            vocab_size: 16,
            num_classes: 4,
            max_positions: 16,
            factors: vec![1, 2, 4, 8],
            schedule: "8x3,4x3,2x3,1x3".into(),
            cache: CachePolicy::CacheRefresh,
            recache: RecacheTiming::Lagged,
            refresh_at: vec![3, 6, 9],
            mask_temp: 5.0,
            guidance_scale: 0.0,
            guidance_last: 0,
            stemp_bias: 0.5,
            stemp_scale: 0.8,
            seed: 7,
            geometry: "4x4".into(),
            class_id: 0,
            count: 4,
            cond_tokens: 0,
            total_steps: 4000,
            batch_size: 24,
            learning_rate: 2e-3,
            min_lr_fraction: 0.05,
            label_drop_prob: 0.1,
            loss_mode: LossMode::GtToDistill,
            train_seed: 7,
            source_seed: 2024,
            eval_every: 1000,
            eval_samples: 1024,
            eval_seed: 4040,
            dims: "L".into(),
            total_tokens: 257,
            flops_cond_tokens: 0,
            out_dir: "out".into(),
        }
    }
}

// =============================================================================
// Presets
// =============================================================================

pub const PRESET_NAMES: &[&str] = &[
    "imagenet-maskgit-8",
    "imagenet-maskgitpp-12-g4",
    "imagenet-maskgitpp-16-g6",
    "imagenet-magnets-12-g4",
    "imagenet-magnets-16-g6",
    "ucf101-magvit",
    "ucf101-magnets",
    "k600-magvit-g2",
    "k600-magnets",
    "k600-magnets-g2",
];

impl RunConfig {
    /// A named benchmark configuration. Image presets decode 16x16 grids and
    /// cost 257 tokens; video presets decode 4x16x16 grids and cost 1025.
    pub fn preset(name: &str) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        let image = |c: &mut RunConfig| {
            c.max_positions = 256;
            c.geometry = "16x16".into();
            c.total_tokens = 257;
        };
        let video = |c: &mut RunConfig| {
            c.max_positions = 1024;
            c.geometry = "4x16x16".into();
            c.total_tokens = 1025;
        };
        let plain = |c: &mut RunConfig, k: usize| {
            c.schedule = format!("1x{k}");
            c.cache = CachePolicy::None;
            c.refresh_at = vec![];
        };
        match name {
            "imagenet-maskgit-8" => {
                image(&mut c);
                plain(&mut c, 8);
                c.mask_temp = 6.0;
            }
            "imagenet-maskgitpp-12-g4" => {
                image(&mut c);
                plain(&mut c, 12);
                c.mask_temp = 6.0;
                c.guidance_scale = 65.0;
                c.guidance_last = 4;
            }
            "imagenet-maskgitpp-16-g6" => {
                image(&mut c);
                plain(&mut c, 16);
                c.mask_temp = 6.0;
                c.guidance_scale = 65.0;
                c.guidance_last = 6;
            }
            "imagenet-magnets-12-g4" => {
                image(&mut c);
                c.mask_temp = 5.0;
                c.guidance_scale = 65.0;
                c.guidance_last = 4;
            }
            "imagenet-magnets-16-g6" => {
                image(&mut c);
                c.schedule = "8x4,4x4,2x4,1x4".into();
                c.refresh_at = vec![4, 8, 12];
                c.mask_temp = 5.0;
                c.guidance_scale = 65.0;
                c.guidance_last = 6;
            }
            "ucf101-magvit" => {
                video(&mut c);
                plain(&mut c, 12);
                c.mask_temp = 5.0;
            }
            "ucf101-magnets" => {
                video(&mut c);
                c.mask_temp = 5.0;
            }
            "k600-magvit-g2" => {
                video(&mut c);
                plain(&mut c, 12);
                c.mask_temp = 12.5;
                c.guidance_scale = 10.0;
                c.guidance_last = 2;
                c.cond_tokens = 512;
            }
            "k600-magnets" => {
                video(&mut c);
                c.mask_temp = 10.0;
                c.guidance_scale = 5.0;
                c.guidance_last = 0;
                c.cond_tokens = 512;
                c.flops_cond_tokens = 512;
            }
            "k600-magnets-g2" => {
                video(&mut c);
                c.mask_temp = 10.0;
                c.guidance_scale = 5.0;
                c.guidance_last = 2;
                c.cond_tokens = 512;
                c.flops_cond_tokens = 512;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (known: {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        }
        Ok(c)
    }
}

// =============================================================================
// Domain-type accessors
// =============================================================================

fn cache_name(c: CachePolicy) -> &'static str {
    match c {
        CachePolicy::None => "none",
        CachePolicy::Cache => "cache",
        CachePolicy::CacheRefresh => "cache-refresh",
    }
}

fn parse_cache(v: &str) -> Result<CachePolicy> {
    match v {
        "none" => Ok(CachePolicy::None),
        "cache" => Ok(CachePolicy::Cache),
        "cache-refresh" => Ok(CachePolicy::CacheRefresh),
        other => Err(Error::Config(format!(
            "cache must be none, cache, or cache-refresh, got {other:?}"
        ))),
    }
}

fn recache_name(r: RecacheTiming) -> &'static str {
    match r {
        RecacheTiming::Immediate => "immediate",
        RecacheTiming::Lagged => "lagged",
    }
}

fn parse_recache(v: &str) -> Result<RecacheTiming> {
    match v {
        "immediate" => Ok(RecacheTiming::Immediate),
        "lagged" => Ok(RecacheTiming::Lagged),
        other => Err(Error::Config(format!(
            "recache must be immediate or lagged, got {other:?}"
        ))),
    }
}

impl RunConfig {
    pub fn nested_config(&self) -> Result<NestedConfig> {
        NestedConfig::new(
            self.num_layers,
            self.hidden,
            self.mlp_dim,
            self.num_heads,
            self.head_dim,
            self.vocab_size,
            self.num_classes,
            self.max_positions,
            self.factors.clone(),
        )
    }

    pub fn decode_schedule(&self) -> Result<DecodeSchedule> {
        DecodeSchedule::from_literal(&self.schedule)
    }

    pub fn sampler_schedule(&self) -> SamplerSchedule {
        let mut s = SamplerSchedule::new(self.mask_temp, self.guidance_scale, self.guidance_last);
        s.stemp_bias = self.stemp_bias;
        s.stemp_scale = self.stemp_scale;
        s
    }

    /// Decode settings; conditioning tokens are filled in by the caller.
    pub fn sampler_config(&self) -> SamplerConfig {
        let mut cfg = SamplerConfig::new(self.seed, self.sampler_schedule());
        cfg.cache_policy = self.cache;
        cfg.recache_timing = self.recache;
        cfg.refresh_at = match self.cache {
            CachePolicy::CacheRefresh => Some(self.refresh_at.clone()),
            _ => None,
        };
        cfg
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::parse(&self.geometry)
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = TrainConfig::new(
            self.total_steps,
            self.batch_size,
            self.learning_rate,
            self.loss_mode,
            self.train_seed,
        );
        t.min_lr_fraction = self.min_lr_fraction;
        t.label_drop_prob = self.label_drop_prob;
        t
    }

    pub fn model_dims(&self) -> Result<ModelDims> {
        ModelDims::by_name(&self.dims)
    }

    /// The cost query this configuration describes. Guidance doubles cost
    /// only when a nonzero scale meets a nonzero window, mirroring decode.
    pub fn flops_query(&self) -> Result<FlopsQuery> {
        let schedule = self.decode_schedule()?;
        let mut q =
            FlopsQuery::baseline(schedule.k_total(), self.total_tokens).with_schedule(&schedule);
        match self.cache {
            CachePolicy::None => {}
            CachePolicy::Cache => q = q.cached(vec![]),
            CachePolicy::CacheRefresh => q = q.cached(self.refresh_at.clone()),
        }
        if self.guidance_scale != 0.0 {
            q = q.guided_last(self.guidance_last);
        }
        q = q.conditioned(self.flops_cond_tokens);
        q.validate()?;
        Ok(q)
    }

    /// Check every section, including the pieces commands build lazily.
    pub fn validate(&self) -> Result<()> {
        self.nested_config()?;
        let geo = self.geometry()?;
        if geo.num_tokens() != self.max_positions {
            return Err(Error::Config(format!(
                "geometry {} has {} tokens but max_positions is {}",
                self.geometry,
                geo.num_tokens(),
                self.max_positions
            )));
        }
        if self.cond_tokens >= geo.num_tokens() {
            return Err(Error::Config(format!(
                "{} conditioning tokens leave nothing to decode in geometry {}",
                self.cond_tokens, self.geometry
            )));
        }
        let schedule = self.decode_schedule()?;
        schedule.validate_factors(&self.factors)?;
        if u64::from(self.class_id) >= self.num_classes as u64 {
            return Err(Error::Config(format!(
                "class_id {} out of range for {} classes",
                self.class_id, self.num_classes
            )));
        }
        self.train_config().validate()?;
        self.model_dims()?;
        self.flops_query()?;
        if self.count == 0 {
            return Err(Error::Config("count must be at least 1".into()));
        }
        if self.out_dir.is_empty() {
            return Err(Error::Config("output dir must not be empty".into()));
        }
        Ok(())
    }
}

// =============================================================================
// Emit
// =============================================================================

fn list(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Render the fully resolved configuration; this is the run manifest.
    #[must_use]
    pub fn emit(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "num_layers = {}", self.num_layers);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "mlp_dim = {}", self.mlp_dim);
        let _ = writeln!(s, "num_heads = {}", self.num_heads);
        let _ = writeln!(s, "head_dim = {}", self.head_dim);
        let _ = writeln!(s, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "max_positions = {}", self.max_positions);
        let _ = writeln!(s, "factors = {}", list(&self.factors));
        let _ = writeln!(s);
        let _ = writeln!(s, "[schedule]");
        let _ = writeln!(s, "steps = {}", self.schedule);
        let _ = writeln!(s, "cache = {}", cache_name(self.cache));
        let _ = writeln!(s, "recache = {}", recache_name(self.recache));
        let _ = writeln!(s, "refresh_at = {}", list(&self.refresh_at));
        let _ = writeln!(s);
        let _ = writeln!(s, "[sampler]");
        let _ = writeln!(s, "mask_temp = {}", self.mask_temp);
        let _ = writeln!(s, "guidance_scale = {}", self.guidance_scale);
        let _ = writeln!(s, "guidance_last = {}", self.guidance_last);
        let _ = writeln!(s, "stemp_bias = {}", self.stemp_bias);
        let _ = writeln!(s, "stemp_scale = {}", self.stemp_scale);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s);
        let _ = writeln!(s, "[generate]");
        let _ = writeln!(s, "geometry = {}", self.geometry);
        let _ = writeln!(s, "class_id = {}", self.class_id);
        let _ = writeln!(s, "count = {}", self.count);
        let _ = writeln!(s, "cond_tokens = {}", self.cond_tokens);
        let _ = writeln!(s);
        let _ = writeln!(s, "[trainer]");
        let _ = writeln!(s, "total_steps = {}", self.total_steps);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "min_lr_fraction = {}", self.min_lr_fraction);
        let _ = writeln!(s, "label_drop_prob = {}", self.label_drop_prob);
        let _ = writeln!(s, "loss_mode = {}", self.loss_mode.name());
        let _ = writeln!(s, "seed = {}", self.train_seed);
        let _ = writeln!(s, "source_seed = {}", self.source_seed);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "eval_samples = {}", self.eval_samples);
        let _ = writeln!(s, "eval_seed = {}", self.eval_seed);
        let _ = writeln!(s);
        let _ = writeln!(s, "[flops]");
        let _ = writeln!(s, "dims = {}", self.dims);
        let _ = writeln!(s, "total_tokens = {}", self.total_tokens);
        let _ = writeln!(s, "cond_tokens = {}", self.flops_cond_tokens);
        let _ = writeln!(s);
        let _ = writeln!(s, "[output]");
        let _ = writeln!(s, "dir = {}", self.out_dir);
        s
    }
}

// =============================================================================
// Parse
// =============================================================================

fn num<T: std::str::FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.parse::<T>().map_err(|_| {
        Error::Config(format!(
            "[{section}] {key}: cannot parse {v:?} as {}",
            std::any::type_name::<T>()
        ))
    })
}

fn num_list(section: &str, key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(vec![]);
    }
    v.split(',')
        .map(|p| num::<usize>(section, key, p.trim()))
        .collect()
}

impl RunConfig {
    /// Parse overrides on top of the defaults. A leading `base = <preset>`
    /// (before any section header) swaps the starting point.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        let mut section = String::new();
        let mut first = true;
        for (ln, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", ln + 1));
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| at(format!("unterminated section header {line:?}")))?;
                section = name.trim().to_string();
                first = false;
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
            let (key, v) = (key.trim(), value.trim());
            if first && section.is_empty() && key == "base" {
                c = RunConfig::preset(v)?;
                continue;
            }
            c.set(&section, key, v).map_err(|e| at(e.to_string()))?;
        }
        Ok(c)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        match (section, key) {
            ("model", "num_layers") => self.num_layers = num(section, key, v)?,
            ("model", "hidden") => self.hidden = num(section, key, v)?,
            ("model", "mlp_dim") => self.mlp_dim = num(section, key, v)?,
            ("model", "num_heads") => self.num_heads = num(section, key, v)?,
            ("model", "head_dim") => self.head_dim = num(section, key, v)?,
            ("model", "vocab_size") => self.vocab_size = num(section, key, v)?,
            ("model", "num_classes") => self.num_classes = num(section, key, v)?,
            ("model", "max_positions") => self.max_positions = num(section, key, v)?,
            ("model", "factors") => self.factors = num_list(section, key, v)?,
            ("schedule", "steps") => self.schedule = v.to_string(),
            ("schedule", "cache") => self.cache = parse_cache(v)?,
            ("schedule", "recache") => self.recache = parse_recache(v)?,
            ("schedule", "refresh_at") => self.refresh_at = num_list(section, key, v)?,
            ("sampler", "mask_temp") => self.mask_temp = num(section, key, v)?,
            ("sampler", "guidance_scale") => self.guidance_scale = num(section, key, v)?,
            ("sampler", "guidance_last") => self.guidance_last = num(section, key, v)?,
            ("sampler", "stemp_bias") => self.stemp_bias = num(section, key, v)?,
            ("sampler", "stemp_scale") => self.stemp_scale = num(section, key, v)?,
            ("sampler", "seed") => self.seed = num(section, key, v)?,
            ("generate", "geometry") => self.geometry = v.to_string(),
            ("generate", "class_id") => self.class_id = num(section, key, v)?,
            ("generate", "count") => self.count = num(section, key, v)?,
            ("generate", "cond_tokens") => self.cond_tokens = num(section, key, v)?,
            ("trainer", "total_steps") => self.total_steps = num(section, key, v)?,
            ("trainer", "batch_size") => self.batch_size = num(section, key, v)?,
            ("trainer", "learning_rate") => self.learning_rate = num(section, key, v)?,
            ("trainer", "min_lr_fraction") => self.min_lr_fraction = num(section, key, v)?,
            ("trainer", "label_drop_prob") => self.label_drop_prob = num(section, key, v)?,
            ("trainer", "loss_mode") => self.loss_mode = LossMode::parse(v)?,
            ("trainer", "seed") => self.train_seed = num(section, key, v)?,
            ("trainer", "source_seed") => self.source_seed = num(section, key, v)?,
            ("trainer", "eval_every") => self.eval_every = num(section, key, v)?,
            ("trainer", "eval_samples") => self.eval_samples = num(section, key, v)?,
            ("trainer", "eval_seed") => self.eval_seed = num(section, key, v)?,
            ("flops", "dims") => self.dims = v.to_string(),
            ("flops", "total_tokens") => self.total_tokens = num(section, key, v)?,
            ("flops", "cond_tokens") => self.flops_cond_tokens = num(section, key, v)?,
            ("output", "dir") => self.out_dir = v.to_string(),
            _ => {
                return Err(Error::Config(format!(
                    "unknown configuration key [{section}] {key}"
                )))
            }
        }
        Ok(())
    }
}

// =============================================================================
// Tests
// =============================================================================
