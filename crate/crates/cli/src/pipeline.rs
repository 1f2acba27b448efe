use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rsdgan_core::attack::{assign_targets, cw_attack, eot_attack, export_adversarial, succeeds_under, AttackConfig, EotConfig};
use rsdgan_core::defense::{defend, DefenseReport, PatchCodec, ProjectionConfig};
use rsdgan_core::gan::{train, Dataset, StabilityStats, TrainConfig, TrainIo};
use rsdgan_core::metrics::{seg_snr, stoi, MetricsReport};
use rsdgan_core::nn::checkpoint;
use rsdgan_core::signal::{read_wav, simulate_rir, write_wav, RirBank, Waveform, SAMPLE_RATE_HZ};
use rsdgan_core::sobolev::{build_theta, ThetaMatrix};
use rsdgan_core::victim::{
    export_corpus, import_corpus, load_victim, save_victim, synth_corpus, train_victim, transcribe, Transcript, Utterance,
    VictimConfig, Vocabulary,
};

use crate::config::{AttackMethod, ExperimentConfig, Stage, Variant};
use crate::report::{render_report, ReportRow};
use crate::CliError;

/// Frame length for segmental SNR (16 ms at 16 kHz).
pub const SEG_SNR_FRAME: usize = 256;

pub const NO_DEFENSE: &str = "No defense";

type StageResult<T> = Result<T, String>;

fn io<T, E: std::fmt::Display>(r: Result<T, E>, what: &Path) -> StageResult<T> {
    r.map_err(|e| format!("{}: {e}", what.display()))
}

fn core<T>(r: rsdgan_core::Result<T>, what: &str) -> StageResult<T> {
    r.map_err(|e| format!("{what}: {e}"))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> StageResult<()> {
    if let Some(dir) = path.parent() {
        io(fs::create_dir_all(dir), dir)?;
    }
    let text = serde_json::to_string_pretty(v).map_err(|e| e.to_string())?;
    io(fs::write(path, text), path)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, producer: Stage) -> StageResult<T> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e} (run stage {producer} first)", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Directory layout under the output root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn corpus_manifest(&self, split: &str) -> PathBuf {
        self.root.join("corpus").join(split).join("manifest.txt")
    }
    pub fn victim(&self) -> PathBuf {
        self.root.join("victim")
    }
    pub fn attack(&self) -> PathBuf {
        self.root.join("attack")
    }
    pub fn rep(&self, r: usize) -> PathBuf {
        self.root.join(format!("rep_{r}"))
    }
    pub fn gan(&self, r: usize) -> PathBuf {
        self.rep(r).join("gan")
    }
    pub fn gan_variant(&self, r: usize, v: Variant) -> PathBuf {
        self.gan(r).join(v.dir())
    }
    pub fn defend(&self, r: usize, v: Variant) -> PathBuf {
        self.rep(r).join("defend").join(v.dir())
    }
    pub fn metrics(&self, r: usize) -> PathBuf {
        self.rep(r).join("evaluate").join("metrics.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageMarker {
    stage: Stage,
    config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackEntry {
    pub file: String,
    /// Index into the test corpus.
    pub source: usize,
    pub truth: String,
    pub target: String,
    pub success: bool,
    pub l_db: f64,
    pub iters_used: usize,
    /// EOT runs only: whether the target survives the held-out filter.
    pub holdout_success: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackManifest {
    pub config_hash: String,
    pub method: AttackMethod,
    pub entries: Vec<AttackEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanStats {
    pub config_hash: String,
    pub variant: Variant,
    pub ring: StabilityStats,
    pub ring_iters: usize,
    pub speech: StabilityStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepMetrics {
    pub config_hash: String,
    pub repetition: usize,
    pub rows: Vec<ReportRow>,
    pub details: Vec<(String, MetricsReport)>,
}

/// Runs the configured stages in dependency order.
pub fn run(cfg: &ExperimentConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let mut stages = cfg.experiment.stages.clone();
    stages.sort();
    stages.dedup();
    let p = Pipeline::new(cfg);
    for stage in stages {
        p.run_stage(stage).map_err(|cause| CliError::Stage { stage, cause })?;
    }
    Ok(())
}

pub struct Pipeline<'a> {
    cfg: &'a ExperimentConfig,
    hash: String,
    layout: Layout,
    vocab: Vocabulary,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a ExperimentConfig) -> Self {
        Self {
            cfg,
            hash: cfg.hash(),
            layout: Layout {
                root: cfg.experiment.out_dir.clone(),
            },
            vocab: Vocabulary::standard(cfg.corpus.vocab_size).expect("vocab size validated"),
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn mark(&self, dir: &Path, stage: Stage) -> StageResult<()> {
        write_json(
            &dir.join("stage.json"),
            &StageMarker {
                stage,
                config_hash: self.hash.clone(),
            },
        )
    }

    pub fn run_stage(&self, stage: Stage) -> StageResult<()> {
        match stage {
            Stage::Corpus => self.corpus(),
            Stage::TrainVictim => self.train_victim(),
            Stage::TrainGan => self.train_gan(),
            Stage::Attack => self.attack(),
            Stage::Defend => self.defend(),
            Stage::Evaluate => self.evaluate(),
            Stage::Report => self.report(),
        }
    }

    fn seed(&self, label: &str, rep: usize) -> u64 {
        self.cfg.derived_seed(label, rep)
    }

    fn corpus(&self) -> StageResult<()> {
        let c = &self.cfg.corpus;
        let train = core(
            synth_corpus(&self.vocab, c.n_per_class, (c.min_tokens, c.max_tokens), self.seed("corpus-train", 0)),
            "training corpus",
        )?;
        // Cases per keyword rounded up, then truncated to the requested count.
        let per_class = c.test_cases.div_ceil(self.vocab.len());
        let mut test = core(
            synth_corpus(&self.vocab, per_class, (c.test_tokens, c.test_tokens), self.seed("corpus-test", 0)),
            "test corpus",
        )?;
        test.truncate(c.test_cases);
        let dir = self.layout.root.join("corpus");
        core(export_corpus(&dir.join("train"), &train, &self.vocab), "export")?;
        core(export_corpus(&dir.join("test"), &test, &self.vocab), "export")?;
        self.mark(&dir, Stage::Corpus)
    }

    fn load_corpus(&self, split: &str) -> StageResult<Vec<Utterance>> {
        let path = self.layout.corpus_manifest(split);
        if !path.exists() {
            return Err(format!("{} missing (run stage corpus first)", path.display()));
        }
        core(import_corpus(&path, &self.vocab), &path.display().to_string())
    }

    fn train_victim(&self) -> StageResult<()> {
        let corpus = self.load_corpus("train")?;
        let vc = VictimConfig {
            seed: self.seed("victim", 0),
            ..self.cfg.victim.clone()
        };
        let model = core(train_victim(&corpus, &self.vocab, &vc), "victim training")?;
        let dir = self.layout.victim();
        core(save_victim(&dir, &model), "saving victim")?;
        self.mark(&dir, Stage::TrainVictim)
    }

    fn load_victim(&self) -> StageResult<rsdgan_core::victim::VictimModel> {
        let dir = self.layout.victim();
        if !dir.join("victim_meta.json").exists() {
            return Err(format!("{} has no victim (run stage train-victim first)", dir.display()));
        }
        core(load_victim(&dir), "loading victim")
    }

    fn bank(&self) -> StageResult<RirBank> {
        let r = &self.cfg.rir;
        core(
            RirBank::simulate(r.n_filters, (r.rt60_min, r.rt60_max), self.seed("rir-bank", 0), SAMPLE_RATE_HZ),
            "rir bank",
        )
    }

    fn theta(&self, bank: &RirBank, n: usize) -> StageResult<ThetaMatrix> {
        let r = &self.cfg.rir;
        core(build_theta(bank, self.seed("theta", 0), r.theta_frames, r.theta_bins, n), "theta")
    }

    fn train_gan(&self) -> StageResult<()> {
        let g = &self.cfg.gan;
        let victim = self.load_victim()?;
        let corpus = self.load_corpus("train")?;
        let codec = core(PatchCodec::fit(&victim.front_end, &corpus), "patch codec")?;
        let speech_data = core(codec.dataset(&victim.front_end, &corpus, g.patch_hop), "patch dataset")?;
        let bank = self.bank()?;
        let ring_theta = self.theta(&bank, g.ring.regularizer_config.eigen_dim)?;
        let speech_theta = self.theta(&bank, g.speech.regularizer_config.eigen_dim)?;
        for rep in 0..self.cfg.experiment.repetitions {
            let gan_dir = self.layout.gan(rep);
            write_json(&gan_dir.join("codec.json"), &codec)?;
            io(fs::write(gan_dir.join("theta.csv"), speech_theta.to_csv()), &gan_dir)?;
            for &v in &g.variants {
                let dir = self.layout.gan_variant(rep, v);
                io(fs::create_dir_all(&dir), &dir)?;
                // Both variants of a repetition share seeds.
                let ring_cfg = TrainConfig {
                    regularizer: v.regularizer(),
                    seed: self.seed("gan-ring", rep),
                    ..g.ring.clone()
                };
                let ring = core(
                    train(
                        &ring_cfg,
                        &Dataset::Ring(g.ring_data),
                        Some(&ring_theta),
                        &TrainIo {
                            log_path: Some(dir.join("ring_log.jsonl")),
                            checkpoint_dir: None,
                        },
                    ),
                    &format!("{} ring run", v.label()),
                )?;
                let speech_cfg = TrainConfig {
                    regularizer: v.regularizer(),
                    seed: self.seed("gan-speech", rep),
                    ..g.speech.clone()
                };
                let speech = core(
                    train(
                        &speech_cfg,
                        &speech_data,
                        Some(&speech_theta),
                        &TrainIo {
                            log_path: Some(dir.join("speech_log.jsonl")),
                            checkpoint_dir: Some(dir.clone()),
                        },
                    ),
                    &format!("{} speech run", v.label()),
                )?;
                write_json(
                    &dir.join("stats.json"),
                    &GanStats {
                        config_hash: self.hash.clone(),
                        variant: v,
                        ring: ring.stats,
                        ring_iters: ring_cfg.total_iters,
                        speech: speech.stats,
                    },
                )?;
            }
            self.mark(&gan_dir, Stage::TrainGan)?;
        }
        Ok(())
    }

    fn attack(&self) -> StageResult<()> {
        let a = &self.cfg.attack;
        let victim = self.load_victim()?;
        let test = self.load_corpus("test")?;
        let truths: Vec<Transcript> = test.iter().map(|u| u.transcript.clone()).collect();
        let targets = core(
            assign_targets(&truths, self.vocab.len(), a.n_targets, 0, self.seed("targets", 0)),
            "target assignment",
        )?;
        let eot = match a.method {
            AttackMethod::Cw => None,
            AttackMethod::Eot => {
                let r = &self.cfg.rir;
                let holdout = core(
                    simulate_rir(0.5 * (r.rt60_min + r.rt60_max), self.seed("rir-holdout", 0), SAMPLE_RATE_HZ),
                    "held-out rir",
                )?;
                Some(EotConfig {
                    bank: self.bank()?,
                    noise_sigma: a.noise_sigma,
                    alpha_k: a.alpha_k,
                    n_mc: a.n_mc,
                    holdout,
                })
            }
        };
        let mut items = Vec::new();
        let mut entries = Vec::new();
        for (i, (u, ts)) in test.iter().zip(&targets).enumerate() {
            for target in ts {
                let cfg = AttackConfig {
                    seed: self.seed(&format!("attack-{i}"), 0),
                    ..a.config.clone()
                };
                let ex = match &eot {
                    None => cw_attack(&victim, &u.waveform, target, &cfg),
                    Some(e) => eot_attack(&victim, &u.waveform, target, &cfg, e),
                };
                let ex = core(ex, &format!("case {i}"))?;
                let holdout_success = match &eot {
                    None => None,
                    Some(e) => Some(core(succeeds_under(&victim, &ex, &e.holdout), "held-out check")?),
                };
                entries.push(AttackEntry {
                    file: format!("adv_{:04}.wav", entries.len()),
                    source: i,
                    truth: self.vocab.render(&u.transcript),
                    target: self.vocab.render(target),
                    success: ex.success,
                    l_db: ex.l_db,
                    iters_used: ex.iters_used,
                    holdout_success,
                });
                items.push((format!("utt_{i:04}.wav"), ex));
            }
        }
        let dir = self.layout.attack();
        core(export_adversarial(&dir, &items, &self.vocab), "export")?;
        write_json(
            &dir.join("attack.json"),
            &AttackManifest {
                config_hash: self.hash.clone(),
                method: a.method,
                entries,
            },
        )?;
        self.mark(&dir, Stage::Attack)
    }

    fn adversarial(&self) -> StageResult<(AttackManifest, Vec<Waveform>)> {
        let dir = self.layout.attack();
        let m: AttackManifest = read_json(&dir.join("attack.json"), Stage::Attack)?;
        let waves = m
            .entries
            .iter()
            .map(|e| {
                let p = dir.join(&e.file);
                core(read_wav(&p), &p.display().to_string())
            })
            .collect::<StageResult<Vec<_>>>()?;
        Ok((m, waves))
    }

    fn generator(&self, rep: usize, v: Variant) -> StageResult<(rsdgan_core::nn::Network, PatchCodec)> {
        let dir = self.layout.gan_variant(rep, v);
        let ck = dir.join("generator.ckpt");
        if !ck.exists() {
            return Err(format!("{} missing (run stage train-gan first)", ck.display()));
        }
        let (g, _) = core(checkpoint::load(&ck), &ck.display().to_string())?;
        let codec: PatchCodec = read_json(&self.layout.gan(rep).join("codec.json"), Stage::TrainGan)?;
        Ok((g, codec))
    }

    fn defend(&self) -> StageResult<()> {
        let victim = self.load_victim()?;
        let (m, waves) = self.adversarial()?;
        let attack_dir = self.layout.attack();
        for rep in 0..self.cfg.experiment.repetitions {
            for &v in &self.cfg.gan.variants {
                let (g, codec) = self.generator(rep, v)?;
                let dir = self.layout.defend(rep, v);
                io(fs::create_dir_all(&dir), &dir)?;
                for (i, (e, x)) in m.entries.iter().zip(&waves).enumerate() {
                    let pcfg = ProjectionConfig {
                        seed: self.seed(&format!("defend-{i}"), rep),
                        ..self.cfg.defense.clone()
                    };
                    let r = core(defend(&g, &victim, &codec, x, &pcfg), &format!("{} input {}", v.label(), e.file))?;
                    let out = format!("syn_{i:04}.wav");
                    core(write_wav(&dir.join(&out), &r.x_syn), "write")?;
                    let truth = core(self.vocab.parse(&e.truth), "truth")?;
                    let input = attack_dir.join(&e.file);
                    let report = DefenseReport::new(
                        &input.display().to_string(),
                        &dir.join(&out).display().to_string(),
                        x,
                        &r,
                        &self.vocab,
                        Some(&truth),
                    );
                    core(report.write(&dir.join(format!("syn_{i:04}.json"))), "report")?;
                }
                self.mark(&dir, Stage::Defend)?;
            }
        }
        Ok(())
    }

    /// Transcripts and quality of `outputs` against the clean test utterances.
    fn score(
        &self,
        victim: &rsdgan_core::victim::VictimModel,
        m: &AttackManifest,
        test: &[Utterance],
        outputs: &[Waveform],
    ) -> StageResult<MetricsReport> {
        let mut pairs = Vec::new();
        let (mut snr, mut st) = (Vec::new(), Vec::new());
        for (e, y) in m.entries.iter().zip(outputs) {
            let clean = &test
                .get(e.source)
                .ok_or_else(|| format!("attack entry {} refers to missing test case {}", e.file, e.source))?
                .waveform;
            let hyp = core(transcribe(victim, y), "transcribe")?;
            pairs.push((hyp, test[e.source].transcript.clone()));
            snr.push(seg_snr(clean, y, SEG_SNR_FRAME).ok());
            st.push(stoi(clean, y).ok());
        }
        let mean = |v: Vec<Option<f64>>| -> Option<f64> {
            let v: Option<Vec<f64>> = v.into_iter().collect();
            v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        core(MetricsReport::from_transcripts(&pairs, mean(snr), mean(st)), "metrics")
    }

    fn evaluate(&self) -> StageResult<()> {
        let victim = self.load_victim()?;
        let test = self.load_corpus("test")?;
        let (m, waves) = self.adversarial()?;
        let fill = |row: &mut ReportRow, r: &MetricsReport| {
            row.wer = Some(r.wer_pct);
            row.sla = Some(r.sla_pct);
            row.seg_snr = r.seg_snr_db;
            row.stoi = r.stoi;
        };
        let undefended = self.score(&victim, &m, &test, &waves)?;
        for rep in 0..self.cfg.experiment.repetitions {
            let mut rows = Vec::new();
            let mut details = Vec::new();
            let mut row = ReportRow::empty(NO_DEFENSE, rep);
            fill(&mut row, &undefended);
            rows.push(row);
            details.push((NO_DEFENSE.to_string(), undefended.clone()));
            for &v in &self.cfg.gan.variants {
                let stats: GanStats = read_json(&self.layout.gan_variant(rep, v).join("stats.json"), Stage::TrainGan)?;
                let dir = self.layout.defend(rep, v);
                let outputs = (0..m.entries.len())
                    .map(|i| {
                        let p = dir.join(format!("syn_{i:04}.wav"));
                        if !p.exists() {
                            return Err(format!("{} missing (run stage defend first)", p.display()));
                        }
                        core(read_wav(&p), &p.display().to_string())
                    })
                    .collect::<StageResult<Vec<_>>>()?;
                let r = self.score(&victim, &m, &test, &outputs)?;
                let mut row = ReportRow::empty(v.label(), rep);
                // A run that never collapses is censored at its iteration budget.
                row.iterations_to_collapse = Some(stats.ring.iterations_to_collapse.unwrap_or(stats.ring_iters) as f64);
                row.modes = stats.ring.modes_learned_per_batch;
                row.gc = Some(stats.speech.gc_per_batch as f64);
                fill(&mut row, &r);
                rows.push(row);
                details.push((v.label().to_string(), r));
            }
            let path = self.layout.metrics(rep);
            write_json(
                &path,
                &RepMetrics {
                    config_hash: self.hash.clone(),
                    repetition: rep,
                    rows,
                    details,
                },
            )?;
            self.mark(path.parent().expect("metrics live in a directory"), Stage::Evaluate)?;
        }
        Ok(())
    }

    fn report(&self) -> StageResult<()> {
        let mut rows = Vec::new();
        for rep in 0..self.cfg.experiment.repetitions {
            let m: RepMetrics = read_json(&self.layout.metrics(rep), Stage::Evaluate)?;
            if m.config_hash != self.hash {
                return Err(format!("repetition {rep} was evaluated under config {}, current is {}", m.config_hash, self.hash));
            }
            rows.extend(m.rows);
        }
        let (csv, text) = render_report(&rows);
        let dir = self.layout.report();
        io(fs::create_dir_all(&dir), &dir)?;
        let csv = format!("# config {}\n{csv}", self.hash);
        io(fs::write(dir.join("report.csv"), csv), &dir)?;
        io(fs::write(dir.join("report.txt"), text), &dir)?;
        write_json(&dir.join("rows.json"), &rows)?;
        self.mark(&dir, Stage::Report)
    }
}
