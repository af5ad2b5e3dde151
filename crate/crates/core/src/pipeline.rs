//! The experiment matrix: raw features and trained networks evaluated under
//! each test modality, plus structure and McGurk analyses.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::abx::{abx_report, build_triplets, AbxReport, AbxTriplet, Task, DEFAULT_BUDGET};
use crate::archive::EmbeddingArchive;
use crate::corpus::{triphone_tokens, word_tokens, Corpus, Split, TriphoneToken};
use crate::error::{Error, Result};
use crate::features::{ModalityLayout, ModalityMask};
use crate::network::{embed_corpus, init_network, raw_archive, train, NetConfig, Network, TrainConfig, TrainData, TrainLog};
use crate::pairing::{audio_visual, ComboMode};
use crate::prep::{PrepConfig, PreparedCorpus, Preprocessor};
use crate::rng::{streams, substream};
use crate::structure::{archive_parallelism, mcgurk_eval, McGurkConfig, McGurkReport, ParallelismReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Raw,
    MonoA,
    MonoV,
    MonoAv,
    Multi,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [TrainMode::Raw, TrainMode::MonoA, TrainMode::MonoV, TrainMode::MonoAv, TrainMode::Multi];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Raw => "raw",
            TrainMode::MonoA => "mono-a",
            TrainMode::MonoV => "mono-v",
            TrainMode::MonoAv => "mono-av",
            TrainMode::Multi => "multi",
        }
    }

    /// Test masks evaluated by default: mono networks only see their own
    /// input modality, the others are tested on all three.
    pub fn default_test_masks(self) -> Vec<TestMask> {
        match self {
            TrainMode::MonoA => vec![TestMask::A],
            TrainMode::MonoV => vec![TestMask::V],
            TrainMode::MonoAv => vec![TestMask::Av],
            TrainMode::Raw | TrainMode::Multi => vec![TestMask::A, TestMask::V, TestMask::Av],
        }
    }

    pub fn combo_mode(self, layout: &ModalityLayout) -> Result<Option<ComboMode>> {
        Ok(match self {
            TrainMode::Raw => None,
            TrainMode::Multi => Some(ComboMode::multitask(layout)?),
            TrainMode::MonoA => Some(ComboMode::Mono(TestMask::A.mask(layout)?)),
            TrainMode::MonoV => Some(ComboMode::Mono(TestMask::V.mask(layout)?)),
            TrainMode::MonoAv => Some(ComboMode::Mono(TestMask::Av.mask(layout)?)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TestMask {
    A,
    V,
    Av,
}

impl TestMask {
    pub fn name(self) -> &'static str {
        match self {
            TestMask::A => "a",
            TestMask::V => "v",
            TestMask::Av => "av",
        }
    }

    pub fn mask(self, layout: &ModalityLayout) -> Result<ModalityMask> {
        let n = layout.num_modalities();
        let (a, v) = audio_visual(layout)?;
        Ok(match self {
            TestMask::A => ModalityMask::only(a, n),
            TestMask::V => ModalityMask::only(v, n),
            TestMask::Av => ModalityMask::keep_all(n),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub modes: Vec<TrainMode>,
    pub prep: PrepConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub abx_budget: usize,
    /// Held-out McGurk template speakers; empty means the last speaker.
    pub mcgurk: McGurkConfig,
    /// Networks on which the McGurk analysis runs.
    pub mcgurk_modes: Vec<TrainMode>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            modes: TrainMode::ALL.to_vec(),
            prep: PrepConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            abx_budget: DEFAULT_BUDGET,
            mcgurk: McGurkConfig::default(),
            mcgurk_modes: vec![TrainMode::MonoAv, TrainMode::Multi],
        }
    }
}

impl ExperimentConfig {
    /// Two hidden layers of 256 units: trains in about a minute on one core,
    /// where the default 5x1000 network takes far longer and underfits the
    /// multi-task stream at the default learning rate.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.net.hidden_layers = 2;
        c.net.hidden_units = 256;
        c
    }

    /// Propagate the experiment seed into the network and training configs.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.net.seed = self.seed;
        c.train.seed = self.seed;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub mode: TrainMode,
    pub test_mask: TestMask,
    pub within: AbxReport,
    pub across: AbxReport,
    pub parallelism: ParallelismReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McGurkResult {
    pub mode: TrainMode,
    pub report: McGurkReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub conditions: Vec<ConditionResult>,
    /// Timing fields are zeroed so the report is reproducible.
    pub train_logs: BTreeMap<String, TrainLog>,
    pub mcgurk: Vec<McGurkResult>,
}

impl ExperimentReport {
    pub fn condition(&self, mode: TrainMode, mask: TestMask) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.mode == mode && c.test_mask == mask)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Error rates in percent, one row per training regime.
    pub fn table_csv(&self) -> String {
        crate::report::ResultSet::from_experiment(self).table_csv()
    }
}

/// Everything that depends only on the corpus and seed, shared by all
/// conditions.
pub struct Evaluation<'a> {
    pub prep: Preprocessor,
    pub train: PreparedCorpus<'a>,
    pub test: PreparedCorpus<'a>,
    pub tokens: Vec<TriphoneToken>,
    pub within: Vec<AbxTriplet>,
    pub across: Vec<AbxTriplet>,
    pub test_corpus: &'a Corpus,
}

/// Fit preprocessing on the training split and fix the ABX triplets.
pub fn prepare<'a>(train_corpus: &'a Corpus, test_corpus: &'a Corpus, cfg: &ExperimentConfig) -> Result<Evaluation<'a>> {
    let prep = Preprocessor::fit(train_corpus, &cfg.prep)?.quantized();
    evaluation(prep, train_corpus, test_corpus, cfg)
}

/// As [`prepare`] with an already fitted preprocessor.
pub fn evaluation<'a>(prep: Preprocessor, train_corpus: &'a Corpus, test_corpus: &'a Corpus, cfg: &ExperimentConfig) -> Result<Evaluation<'a>> {
    let train = PreparedCorpus::new(train_corpus, &prep)?;
    let test = PreparedCorpus::new(test_corpus, &prep)?;
    let tokens = triphone_tokens(test_corpus, &test_corpus.inventory);
    let within = build_triplets(&tokens, &test_corpus.inventory, Task::Within, cfg.abx_budget, &mut substream(cfg.seed, streams::TRIPLETS, 0));
    let across = build_triplets(&tokens, &test_corpus.inventory, Task::Across, cfg.abx_budget, &mut substream(cfg.seed, streams::TRIPLETS, 1));
    Ok(Evaluation {
        prep,
        train,
        test,
        tokens,
        within,
        across,
        test_corpus,
    })
}

impl Evaluation<'_> {
    pub fn abx(&self, task: Task, archive: &EmbeddingArchive) -> Result<AbxReport> {
        let triplets = match task {
            Task::Within => &self.within,
            Task::Across => &self.across,
        };
        abx_report(task, triplets, &self.tokens, archive, &self.test_corpus.inventory)
    }

    pub fn archive(&self, net: Option<&Network<f32>>, mask: TestMask) -> Result<EmbeddingArchive> {
        let m = mask.mask(&self.test.layout)?;
        match net {
            Some(net) => embed_corpus(net, &self.test, &m),
            None => raw_archive(&self.test, &m),
        }
    }

    pub fn condition(&self, mode: TrainMode, mask: TestMask, net: Option<&Network<f32>>) -> Result<ConditionResult> {
        let archive = self.archive(net, mask)?;
        Ok(ConditionResult {
            mode,
            test_mask: mask,
            within: self.abx(Task::Within, &archive)?,
            across: self.abx(Task::Across, &archive)?,
            parallelism: archive_parallelism(&archive, self.test_corpus)?,
        })
    }

    /// Train one network for `mode` (which must not be raw).
    pub fn train(&self, mode: TrainMode, cfg: &ExperimentConfig) -> Result<(Network<f32>, TrainLog)> {
        let combo = mode
            .combo_mode(&self.train.layout)?
            .ok_or_else(|| Error::InvalidConfig("raw mode has no network to train".into()))?;
        let cfg = cfg.resolved();
        let mut net_cfg = cfg.net.clone();
        net_cfg.input_dim = self.train.input_dim();
        let net = init_network::<f32>(&net_cfg)?;
        let data = TrainData {
            prepared: &self.train,
            tokens: word_tokens(self.train.corpus),
            mode: combo,
        };
        train(net, &cfg.train, &data)
    }

    pub fn mcgurk(&self, net: &Network<f32>, cfg: &ExperimentConfig) -> Result<McGurkReport> {
        let mut mc = cfg.mcgurk.clone();
        if mc.heldout_speakers.is_empty() {
            let last = self
                .test_corpus
                .speakers
                .iter()
                .next_back()
                .ok_or_else(|| Error::InsufficientVectors("corpus has no speakers".into()))?;
            mc.heldout_speakers = BTreeSet::from([last.clone()]);
        }
        mcgurk_eval(net, &self.test, &mc, &mut substream(cfg.seed, streams::TRIPLETS, 2))
    }
}

/// Run every configured mode on `corpus` and collect the results.
pub fn run_experiment(corpus: &Corpus, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let train_corpus = corpus.split(Split::Train);
    let test_corpus = corpus.split(Split::Test);
    let eval = prepare(&train_corpus, &test_corpus, cfg)?;
    let mut conditions = Vec::new();
    let mut train_logs = BTreeMap::new();
    let mut mcgurk = Vec::new();
    for &mode in &cfg.modes {
        let net = if mode == TrainMode::Raw {
            None
        } else {
            let (net, log) = eval.train(mode, cfg)?;
            train_logs.insert(mode.name().to_string(), log.without_timing());
            Some(net)
        };
        for mask in mode.default_test_masks() {
            conditions.push(eval.condition(mode, mask, net.as_ref())?);
        }
        if let Some(net) = &net {
            if cfg.mcgurk_modes.contains(&mode) {
                mcgurk.push(McGurkResult {
                    mode,
                    report: eval.mcgurk(net, cfg)?,
                });
            }
        }
    }
    Ok(ExperimentReport {
        seed: cfg.seed,
        conditions,
        train_logs,
        mcgurk,
    })
}
