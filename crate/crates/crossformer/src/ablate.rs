//! Matched-budget ablations over module toggles and stage removal.

use std::collections::BTreeSet;

use crossformer_core::data::{split_held_out, windows, SequenceRecord, SkeletonSpec};
use crossformer_core::model::{param_count, is_interaction_slot, param_ledger, ModelConfig, ModelParams};
use crossformer_core::train::{train, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stages {
    Both,
    SpatialOnly,
    TemporalOnly,
}

/// One configuration of the ablation table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: String,
    pub cji: bool,
    pub cfi: bool,
    pub spatial_embed: bool,
    pub temporal_embed: bool,
    pub stages: Stages,
    /// CJI and CFI present but zero-initialized and frozen.
    pub zeroed: bool,
}

impl Variant {
    fn toggles(cji: bool, cfi: bool, es: bool, et: bool) -> Self {
        let parts: Vec<&str> =
            [(cji, "cji"), (cfi, "cfi"), (es, "es"), (et, "et")].iter().filter(|(on, _)| *on).map(|(_, n)| *n).collect();
        let name = if parts.is_empty() { "none".to_string() } else { parts.join("+") };
        Variant { name, cji, cfi, spatial_embed: es, temporal_embed: et, stages: Stages::Both, zeroed: false }
    }

    /// Parses a row name: `none`, a `+`-joined subset of `cji`, `cfi`, `es`,
    /// `et`, or one of `full`, `zeroed`, `spatial_only`, `temporal_only`.
    pub fn parse(name: &str) -> Result<Self> {
        let full = Variant::toggles(true, true, true, true);
        let v = match name {
            "full" => Variant { name: "full".into(), ..full },
            "none" => Variant::toggles(false, false, false, false),
            "zeroed" => Variant { name: name.into(), spatial_embed: false, temporal_embed: false, zeroed: true, ..full },
            "spatial_only" => Variant { name: name.into(), stages: Stages::SpatialOnly, ..full },
            "temporal_only" => Variant { name: name.into(), stages: Stages::TemporalOnly, ..full },
            _ => {
                let mut flags = [false; 4];
                for part in name.split('+') {
                    let i = ["cji", "cfi", "es", "et"].iter().position(|p| *p == part).ok_or_else(|| {
                        CliError::Core(crossformer_core::Error::Config(format!("unknown ablation row `{name}`")))
                    })?;
                    if flags[i] {
                        return Err(CliError::Core(crossformer_core::Error::Config(format!("`{part}` repeated in `{name}`"))));
                    }
                    flags[i] = true;
                }
                Variant::toggles(flags[0], flags[1], flags[2], flags[3])
            }
        };
        Ok(v)
    }

    pub fn model(&self, base: &ModelConfig) -> ModelConfig {
        let mut m = base.clone().with_toggles(self.cji, self.cfi, self.spatial_embed, self.temporal_embed);
        match self.stages {
            Stages::Both => {}
            Stages::SpatialOnly => m.temporal_layers = 0,
            Stages::TemporalOnly => m.spatial_layers = 0,
        }
        m
    }

    /// Parameters that receive updates; for `zeroed` this excludes the
    /// frozen CJI/CFI slots, which makes it match the `none` row.
    pub fn trainable_params(&self, base: &ModelConfig) -> usize {
        let model = self.model(base);
        if !self.zeroed {
            return param_count(&model);
        }
        param_ledger(&model).iter().filter(|s| !is_interaction_slot(&s.name)).map(|s| s.numel()).sum()
    }
}

/// The CJI/CFI/E_s/E_t combinations of the module ablation, then the
/// zeroed-module control and the single-stage rows.
pub const DEFAULT_ROWS: &[&str] = &[
    "none",
    "es+et",
    "cji",
    "cji+es",
    "cji+es+et",
    "cji+cfi+et",
    "cfi",
    "cfi+et",
    "cfi+es+et",
    "full",
    "zeroed",
    "spatial_only",
    "temporal_only",
];

pub fn parse_rows(names: &[String]) -> Result<Vec<Variant>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for n in names {
        let v = Variant::parse(n.trim())?;
        let key = (v.cji, v.cfi, v.spatial_embed, v.temporal_embed, v.stages as u8, v.zeroed);
        if !seen.insert(key) {
            return Err(CliError::Core(crossformer_core::Error::Config(format!("ablation row `{n}` duplicates an earlier row"))));
        }
        out.push(v);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub variant: Variant,
    pub seed: u64,
    pub trainable_params: usize,
    pub final_train_loss: f64,
    pub final_eval_mpjpe: f64,
}

/// Trains every variant under every seed with the same data, epochs, batch
/// size and schedule. The held-out split is taken from `records` unless
/// `eval_records` is given.
pub fn run(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    records: Vec<SequenceRecord>,
    eval_records: Option<Vec<SequenceRecord>>,
    mut progress: impl FnMut(&AblationResult),
) -> Result<Vec<AblationResult>> {
    let (train_records, held) = match eval_records {
        Some(e) => (records, e),
        None => split_held_out(records),
    };
    if held.is_empty() {
        return Err(CliError::Core(crossformer_core::Error::Config("ablation needs at least two records or an eval set".into())));
    }
    let skeleton = SkeletonSpec::for_joints(base.model.num_joints);
    let mut train_windows = Vec::new();
    for r in &train_records {
        train_windows.extend(windows(r, base.model.frames)?);
    }
    let mut out = Vec::new();
    for v in variants {
        for &seed in seeds {
            let cfg = TrainConfig { model: v.model(&base.model), seed, freeze_interaction: v.zeroed, ..base.clone() };
            let mut params = ModelParams::init(&cfg.model, seed)?;
            let logs = train(&cfg, &mut params, &skeleton, &train_windows, &held, |_, _| Ok(()))?;
            let last = logs.last().ok_or_else(|| CliError::Core(crossformer_core::Error::Config("ablation needs epochs >= 1".into())))?;
            let result = AblationResult {
                variant: v.clone(),
                seed,
                trainable_params: v.trainable_params(&base.model),
                final_train_loss: last.train_loss,
                final_eval_mpjpe: last.eval_mpjpe.expect("held-out set is non-empty"),
            };
            progress(&result);
            out.push(result);
        }
    }
    Ok(out)
}

pub const CSV_HEADER: [&str; 12] = [
    "row",
    "cji",
    "cfi",
    "e_s",
    "e_t",
    "spatial_layers",
    "temporal_layers",
    "zeroed",
    "trainable_params",
    "seed",
    "final_train_loss",
    "final_eval_mpjpe",
];

pub fn to_csv(base: &ModelConfig, results: &[AblationResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Format(e.to_string());
    w.write_record(CSV_HEADER).map_err(fail)?;
    let bit = |b: bool| if b { "1" } else { "0" }.to_string();
    for r in results {
        let v = &r.variant;
        let m = v.model(base);
        w.write_record([
            v.name.clone(),
            bit(v.cji),
            bit(v.cfi),
            bit(v.spatial_embed),
            bit(v.temporal_embed),
            m.spatial_layers.to_string(),
            m.temporal_layers.to_string(),
            bit(v.zeroed),
            r.trainable_params.to_string(),
            r.seed.to_string(),
            r.final_train_loss.to_string(),
            r.final_eval_mpjpe.to_string(),
        ])
        .map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
