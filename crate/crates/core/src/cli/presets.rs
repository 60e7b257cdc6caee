//! Named option bundles for the evaluation and post-evaluation systems.

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::mlp::{Depth, MlpConfig};
use crate::model::TransformKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Threshold labels; per-language encoder choice, standardized.
    EvalPhaseTask1,
    /// MLP labels on standardized Llama-7B layer 25.
    PostEvalTask1,
    /// Two-layer MLP disagreement regressor.
    EvalPhaseTask2,
    /// Four Llama-7B virtual annotators with STD.
    PostEvalTask2,
}

/// A layer store and the transform applied to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerChoice {
    pub model_id: &'static str,
    pub layer: u32,
    pub transform: TransformKind,
}

/// Norwegian slot of the evaluation-phase system: a Chinese encoder with no
/// transform. Kept as a plain store id; supply a store under this name to use it.
pub const LERT_SLOT: LayerChoice = LayerChoice {
    model_id: "lert-base-chinese",
    layer: 12,
    transform: TransformKind::None,
};

/// Secondary post-evaluation source for the label MLP.
pub const POST_EVAL_TASK1_ALT: LayerChoice = LayerChoice {
    model_id: "xlm-roberta-base",
    layer: 11,
    transform: TransformKind::Standardize,
};

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::EvalPhaseTask1 => "eval-phase-task1",
            Preset::PostEvalTask1 => "post-eval-task1",
            Preset::EvalPhaseTask2 => "eval-phase-task2",
            Preset::PostEvalTask2 => "post-eval-task2",
        }
    }

    pub fn task(self) -> u8 {
        match self {
            Preset::EvalPhaseTask1 | Preset::PostEvalTask1 => 1,
            Preset::EvalPhaseTask2 | Preset::PostEvalTask2 => 2,
        }
    }

    /// Store and transform used for a language's rows.
    pub fn layer_for(self, language: &str) -> Option<LayerChoice> {
        let standardized = |model_id, layer| LayerChoice {
            model_id,
            layer,
            transform: TransformKind::Standardize,
        };
        match self {
            Preset::EvalPhaseTask1 => Some(match language {
                "zh" | "ru" => standardized("bert-multi-base", 12),
                "no" => LERT_SLOT,
                _ => standardized("xlm-roberta-base", 10),
            }),
            Preset::PostEvalTask1 => Some(standardized("llama-7b", 25)),
            Preset::EvalPhaseTask2 => Some(LayerChoice {
                model_id: "xlm-roberta-base",
                layer: 12,
                transform: TransformKind::None,
            }),
            Preset::PostEvalTask2 => None,
        }
    }

    /// Whether thresholds are fitted separately per language.
    pub fn per_language_thresholds(self) -> bool {
        self == Preset::EvalPhaseTask1
    }

    pub fn mlp_config(self) -> Option<MlpConfig> {
        match self {
            Preset::PostEvalTask1 => Some(MlpConfig::subtask1()),
            Preset::EvalPhaseTask2 => Some(MlpConfig {
                depth: Depth::Mlp2,
                epochs: 200,
                batch_size: 16,
                ..MlpConfig::default()
            }),
            _ => None,
        }
    }

    /// Dashed annotator codes of the fixed ensemble.
    pub fn ensemble_codes(self) -> Option<&'static str> {
        match self {
            // layer 24 standardized, 16 raw, 24 centered, 16 all-but-the-top
            Preset::PostEvalTask2 => Some("AjY-AiX-AjZ-AiW"),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_annotator_group, BaseModel};

    #[test]
    fn post_eval_ensemble_matches_layers() {
        let cfgs = parse_annotator_group(Preset::PostEvalTask2.ensemble_codes().unwrap()).unwrap();
        let got: Vec<(u32, TransformKind)> = cfgs.iter().map(|c| (c.layer(), c.transform)).collect();
        assert!(cfgs.iter().all(|c| c.model == BaseModel::Llama7b));
        assert_eq!(
            got,
            vec![
                (24, TransformKind::Standardize),
                (16, TransformKind::None),
                (24, TransformKind::Center),
                (16, TransformKind::Abtt),
            ]
        );
    }

    #[test]
    fn eval_phase_language_routing() {
        let p = Preset::EvalPhaseTask1;
        assert_eq!(p.layer_for("zh").unwrap().model_id, "bert-multi-base");
        assert_eq!(p.layer_for("de").unwrap().layer, 10);
        assert_eq!(p.layer_for("no").unwrap(), LERT_SLOT);
        assert_eq!(Preset::PostEvalTask1.mlp_config().unwrap().batch_size, 128);
    }
}
