//! Run configuration: one flat `key=value` file covering the model, both
//! training stages, the synthetic dataset, and evaluation. Keys carry a
//! section prefix (`model.embed_dim=64`); `#` starts a comment. A run
//! writes its effective config back out in canonical form so results can
//! be reproduced from the output directory alone.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::dataio::synth::SynthSpec;
use crate::error::{Error, Result};
use crate::eval::EvalMode;
use crate::model::ModelConfig;
use crate::trainer::StageConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub synth: SynthSpec,
    /// Dataset root holding manifest.tsv and stats.txt.
    pub data_root: Option<PathBuf>,
    pub eval_normalize: bool,
    pub eval_mode: EvalMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            pretrain: StageConfig::pretrain_reference(7),
            finetune: StageConfig::finetune_reference(7),
            synth: SynthSpec::default(),
            data_root: None,
            eval_normalize: true,
            eval_mode: EvalMode::All,
        }
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                what: "run config".into(),
                position: lineno + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set_key(key, value)
                .map_err(|e| parse_err(e.to_string()))?;
        }
        cfg.model.validate()?;
        cfg.synth.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        match key.split_once('.') {
            Some(("model", rest)) => self.model.set_key(rest, value),
            Some(("pretrain", rest)) => self.pretrain.set_key(rest, value),
            Some(("finetune", rest)) => self.finetune.set_key(rest, value),
            Some(("synth", rest)) => self.synth.set_key(rest, value),
            Some(("data", "root")) => {
                self.data_root = Some(PathBuf::from(value));
                Ok(())
            }
            Some(("eval", "normalize")) => {
                self.eval_normalize = value
                    .parse()
                    .map_err(|_| Error::Config(format!("eval.normalize: bad bool '{value}'")))?;
                Ok(())
            }
            Some(("eval", "mode")) => {
                self.eval_mode = EvalMode::parse(value)
                    .ok_or_else(|| Error::Config(format!("eval.mode: unknown mode '{value}'")))?;
                Ok(())
            }
            _ => Err(Error::Config(format!("unknown config key '{key}'"))),
        }
    }

    /// Apply one seed to every stage. The synthetic generator keeps its
    /// own seed key so a dataset can stay fixed across training seeds.
    pub fn set_training_seed(&mut self, seed: u64) {
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
    }

    /// Canonical text form: parsing it back yields an equivalent config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = |name: &str, block: &str| {
            for line in block.lines() {
                writeln!(out, "{name}.{line}").expect("string write");
            }
        };
        section("model", &self.model.to_kv_block());
        section("pretrain", &self.pretrain.to_kv_block());
        section("finetune", &self.finetune.to_kv_block());
        section("synth", &self.synth.to_kv_block());
        if let Some(root) = &self.data_root {
            writeln!(out, "data.root={}", root.display()).expect("string write");
        }
        writeln!(out, "eval.normalize={}", self.eval_normalize).expect("string write");
        writeln!(out, "eval.mode={}", self.eval_mode.as_str()).expect("string write");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Stage;

    #[test]
    fn defaults_have_expected_stages() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.pretrain.stage, Stage::Pretrain);
        assert_eq!(cfg.finetune.stage, Stage::Finetune);
        assert_eq!(cfg.pretrain.batch_size, 512);
        assert_eq!(cfg.finetune.p * cfg.finetune.k, 32);
    }

    #[test]
    fn parse_overrides_and_round_trip() {
        let text = "\
# comment line
model.embed_dim = 32
model.num_layers=2
pretrain.epochs=5
pretrain.lr=0.01
finetune.p=4
synth.identities=16
data.root=/tmp/ships
eval.normalize=false
eval.mode=opt2sar
";
        let cfg = RunConfig::from_text(text).unwrap();
        assert_eq!(cfg.model.embed_dim, 32);
        assert_eq!(cfg.model.num_layers, 2);
        assert_eq!(cfg.pretrain.epochs, 5);
        assert_eq!(cfg.pretrain.lr, 0.01);
        assert_eq!(cfg.finetune.p, 4);
        assert_eq!(cfg.synth.identities, 16);
        assert_eq!(cfg.data_root.as_deref(), Some(Path::new("/tmp/ships")));
        assert!(!cfg.eval_normalize);
        assert_eq!(cfg.eval_mode, EvalMode::OptToSar);

        let canon = cfg.to_text();
        let reparsed = RunConfig::from_text(&canon).unwrap();
        assert_eq!(reparsed.to_text(), canon);
    }

    #[test]
    fn bad_keys_and_values_report_line() {
        let err = RunConfig::from_text("model.embed_dim=64\nbogus.key=1\n").unwrap_err();
        match err {
            Error::Parse { position, .. } => assert_eq!(position, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(RunConfig::from_text("model.embed_dim=soup\n").is_err());
        assert!(RunConfig::from_text("model.embed_dim 64\n").is_err());
        // validation still applies after parsing
        assert!(RunConfig::from_text("model.num_heads=7\n").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        let mut cfg = RunConfig::default();
        cfg.set_key("finetune.margin", "0.5").unwrap();
        cfg.set_training_seed(99);
        cfg.save(&path).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded.finetune.margin, 0.5);
        // seeds are runtime state, not config
        assert_eq!(loaded.finetune.seed, 7);
        assert_eq!(loaded.to_text(), RunConfig { finetune: StageConfig { seed: 7, ..cfg.finetune.clone() }, ..cfg.clone() }.to_text());
    }
}
