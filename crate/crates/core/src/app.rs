//! The five commands of the `pulseforge` tool: synthesize a container, run
//! an estimator on a recording, train weights, build a benchmark table and
//! simulate duty-cycled energy use.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{estimate_hr, metrics, periodogram, snr_db, MetricReport, HR_BAND};
use crate::baselines::{chrom, green, pos, roi_trace, POS_WINDOW_S};
use crate::container::{read_container, write_container};
use crate::dutycycle::{
    read_trace, replay, simulate_energy, EnergyModel, EnergyReport, SamplerConfig,
};
use crate::error::{Error, Result};
use crate::pipeline::{
    hr_windows, run, synth_video, synthetic_corpus, CorpusSpec, HrWindow, PipelineConfig,
    SynthSpec, SyntheticTraining,
};
use crate::signal::{BvpSignal, FrameSequence};
use crate::stnet::{
    load_weights, save_weights, ArchConfig, ModelOptions, NetworkWeights, TrainConfig, TrainReport,
};
use crate::synth::Scenario;

/// Pulse extraction method.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Ubihr,
    Green,
    Chrom,
    Pos,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ubihr, Method::Green, Method::Chrom, Method::Pos];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Ubihr => "ubihr",
            Method::Green => "green",
            Method::Chrom => "chrom",
            Method::Pos => "pos",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub scenarios: Vec<Scenario>,
    pub videos: usize,
    pub duration_s: f64,
    pub hr_range: [f64; 2],
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            scenarios: Scenario::ALL.to_vec(),
            videos: 3,
            duration_s: 30.0,
            hr_range: [50.0, 130.0],
        }
    }
}

/// Everything a command needs. Every field has a default; a config file
/// may give any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Frame container to read. Without one, `synth` is rendered.
    pub input: Option<PathBuf>,
    pub synth: SynthSpec,
    /// Weights directory or manifest.
    pub weights: Option<PathBuf>,
    pub method: Method,
    pub pipeline: PipelineConfig,
    pub model: ModelOptions,
    pub arch: ArchConfig,
    pub drop1: f64,
    pub drop2: f64,
    /// Window length used at inference instead of `pipeline.window`.
    pub reinfer_window: Option<usize>,
    pub train: TrainConfig,
    pub corpus: CorpusSpec,
    pub bench: BenchConfig,
    pub sampler: SamplerConfig,
    pub energy: EnergyModel,
    /// Face-presence trace for the duty-cycle simulation.
    pub trace: Option<PathBuf>,
    pub output: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            synth: SynthSpec::default(),
            weights: None,
            method: Method::Ubihr,
            pipeline: PipelineConfig::default(),
            model: ModelOptions::default(),
            arch: ArchConfig::standard(),
            drop1: crate::stnet::weights::DEFAULT_DROP1,
            drop2: crate::stnet::weights::DEFAULT_DROP2,
            reinfer_window: None,
            train: TrainConfig::default(),
            corpus: CorpusSpec::default(),
            bench: BenchConfig::default(),
            sampler: SamplerConfig::default(),
            energy: EnergyModel::default(),
            trace: None,
            output: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        for (what, p) in [
            ("input", &self.input),
            ("weights", &self.weights),
            ("trace", &self.trace),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::validation(format!(
                        "{what} path {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        self.pipeline.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        self.corpus.validate()?;
        self.sampler.validate()?;
        self.energy.validate()?;
        for d in [self.drop1, self.drop2] {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::validation(format!("drop rate {d} outside [0, 1)")));
            }
        }
        if let Some(w) = self.reinfer_window {
            if w <= crate::stnet::GROUPS {
                return Err(Error::validation(format!("reinfer_window {w} too short")));
            }
        }
        if self.bench.videos == 0 || !(self.bench.duration_s > 0.0) {
            return Err(Error::validation(
                "bench needs videos > 0 and duration_s > 0",
            ));
        }
        Ok(())
    }

    /// SHA-256 of the configuration with the output directory left out, so
    /// the same settings hash alike wherever they write.
    pub fn config_hash(&self) -> String {
        let canonical = RunConfig {
            output: PathBuf::new(),
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    fn provenance(&self, command: &str) -> Provenance {
        Provenance {
            command: command.to_string(),
            config_hash: self.config_hash(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    fn csv_comment(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }
}

/// Process exit status for an error: 2 for bad configuration or input,
/// 3 for numeric failures, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric { .. } => 3,
        Error::Validation(_) | Error::Parse { .. } | Error::Json(_) | Error::Range { .. } => 2,
        _ => 1,
    }
}

fn sub_seed(seed: u64, tag: u64) -> u64 {
    (seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)).rotate_left(17)
}

const TAG_CORPUS: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_TRAIN: u64 = 3;
const TAG_BENCH: u64 = 4;

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn load_input(cfg: &RunConfig) -> Result<FrameSequence<f32>> {
    match &cfg.input {
        Some(dir) => read_container(dir),
        None => synth_video(&cfg.synth, cfg.seed),
    }
}

fn load_model(cfg: &RunConfig) -> Result<NetworkWeights<f32>> {
    let Some(path) = &cfg.weights else {
        return Err(Error::validation("the ubihr method needs --weights"));
    };
    load_weights::<f32>(path)?.with_dropout(cfg.drop1, cfg.drop2)
}

/// Renders `cfg.synth` with `cfg.seed` into a frame container.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Provenance> {
    cfg.validate()?;
    let seq = synth_video::<f32>(&cfg.synth, cfg.seed)?;
    write_container(&seq, &cfg.output)?;
    let prov = cfg.provenance("synth");
    write_json(&cfg.output.join("provenance.json"), &prov)?;
    log::info!("wrote {} frames to {}", seq.len(), cfg.output.display());
    Ok(prov)
}

/// Pulse and heart rate of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub bvp: BvpSignal<f64>,
    pub hr: Vec<HrWindow>,
    pub bpm: f64,
    pub filled_frames: usize,
}

/// Applies `method` to `seq`. `weights` is needed for the network only.
pub fn estimate(
    seq: &FrameSequence<f32>,
    method: Method,
    weights: Option<&NetworkWeights<f32>>,
    cfg: &RunConfig,
) -> Result<Estimate> {
    let p = &cfg.pipeline;
    if method == Method::Ubihr {
        let w = weights.ok_or_else(|| Error::validation("the ubihr method needs weights"))?;
        let out = run(seq, w, &cfg.model, p, cfg.reinfer_window)?;
        return Ok(Estimate {
            bvp: out.bvp,
            hr: out.hr,
            bpm: out.bpm,
            filled_frames: out.filled_frames,
        });
    }
    let trace = roi_trace(seq)?;
    let bvp = match method {
        Method::Green => green(&trace)?,
        Method::Chrom => chrom(&trace)?,
        Method::Pos => pos(&trace, POS_WINDOW_S)?,
        Method::Ubihr => unreachable!(),
    };
    let hr = hr_windows(&bvp, seq.ground_truth(), p.hr_window_s, p.hr_hop_s)?;
    let bpm = estimate_hr(&bvp, HR_BAND)?.bpm;
    Ok(Estimate {
        bvp,
        hr,
        bpm,
        filled_frames: trace.interpolated.iter().filter(|f| **f).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub provenance: Provenance,
    pub method: Method,
    pub frames: usize,
    pub fps: f64,
    pub window: usize,
    pub infer_window: usize,
    pub bpm: f64,
    pub true_bpm: Option<f64>,
    pub filled_frames: usize,
    pub metrics: Option<MetricReport>,
}

fn truth_f64(seq: &FrameSequence<f32>) -> Option<BvpSignal<f64>> {
    seq.ground_truth().map(|g| g.cast())
}

/// Writes `bvp.csv`, `hr.csv`, `periodogram.csv`, `bland_altman.csv` (with
/// ground truth) and `report.json`.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let seq = load_input(cfg)?;
    let weights = match cfg.method {
        Method::Ubihr => Some(load_model(cfg)?),
        _ => None,
    };
    let est = estimate(&seq, cfg.method, weights.as_ref(), cfg)?;
    let prov = cfg.provenance("run");
    let truth = truth_f64(&seq);
    let out = &cfg.output;
    fs::create_dir_all(out)?;

    let mut bvp_csv = prov.csv_comment();
    bvp_csv.push_str("time_s,bvp,true_bvp\n");
    for (i, v) in est.bvp.samples.iter().enumerate() {
        let t = truth.as_ref().and_then(|g| {
            let j = (i as f64 * g.rate / est.bvp.rate).round() as usize;
            g.samples.get(j).copied()
        });
        let t = t.map(|t| format!("{t:.6}")).unwrap_or_default();
        writeln!(bvp_csv, "{:.6},{v:.6},{t}", i as f64 / est.bvp.rate).unwrap();
    }
    fs::write(out.join("bvp.csv"), bvp_csv)?;

    let mut hr_csv = prov.csv_comment();
    hr_csv.push_str("start_s,end_s,pred_bpm,true_bpm\n");
    for h in &est.hr {
        let t = h.true_bpm.map(|t| format!("{t:.4}")).unwrap_or_default();
        writeln!(
            hr_csv,
            "{:.3},{:.3},{:.4},{t}",
            h.start_s, h.end_s, h.pred_bpm
        )
        .unwrap();
    }
    fs::write(out.join("hr.csv"), hr_csv)?;

    let pg = periodogram(&est.bvp)?;
    let mut pg_csv = prov.csv_comment();
    pg_csv.push_str("freq_hz,power\n");
    for (f, p) in pg.freqs.iter().zip(&pg.power) {
        if (HR_BAND[0] * 0.5..=HR_BAND[1] * 1.5).contains(f) {
            writeln!(pg_csv, "{f:.5},{p:.6e}").unwrap();
        }
    }
    fs::write(out.join("periodogram.csv"), pg_csv)?;

    let paired: Vec<(f64, f64)> = est
        .hr
        .iter()
        .filter_map(|h| h.true_bpm.map(|t| (h.pred_bpm, t)))
        .collect();
    let report_metrics = if paired.len() == est.hr.len() && !paired.is_empty() {
        let mut ba = prov.csv_comment();
        ba.push_str("mean_bpm,diff_bpm\n");
        for (p, t) in &paired {
            writeln!(ba, "{:.4},{:.4}", (p + t) / 2.0, p - t).unwrap();
        }
        fs::write(out.join("bland_altman.csv"), ba)?;
        let (pred, tru): (Vec<f64>, Vec<f64>) = paired.into_iter().unzip();
        Some(metrics(
            &pred,
            &tru,
            Some(&est.bvp),
            truth.as_ref(),
            &prov.config_hash,
        )?)
    } else {
        None
    };

    let report = RunReport {
        provenance: prov,
        method: cfg.method,
        frames: seq.len(),
        fps: seq.fps(),
        window: cfg.pipeline.window,
        infer_window: cfg.reinfer_window.unwrap_or(cfg.pipeline.window),
        bpm: est.bpm,
        true_bpm: match &truth {
            Some(t) => Some(estimate_hr(t, HR_BAND)?.bpm),
            None => None,
        },
        filled_frames: est.filled_frames,
        metrics: report_metrics,
    };
    write_json(&out.join("report.json"), &report)?;
    log::info!("{}: {:.2} bpm", cfg.method.name(), report.bpm);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub provenance: Provenance,
    pub samples: usize,
    pub parameters: usize,
    pub report: TrainReport,
}

/// Trains on a synthetic corpus drawn from `cfg.synth` and `cfg.corpus`.
/// Writes the weights files, `training_log.csv` and `train_report.json`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let init = NetworkWeights::<f32>::init(cfg.arch, sub_seed(cfg.seed, TAG_INIT))?
        .with_dropout(cfg.drop1, cfg.drop2)?;
    let tc = TrainConfig {
        seed: sub_seed(cfg.seed, TAG_TRAIN),
        ..cfg.train
    };
    let plan = SyntheticTraining {
        base: &cfg.synth,
        corpus: &cfg.corpus,
        pipeline: &cfg.pipeline,
        model: &cfg.model,
        train: &tc,
        seed: sub_seed(cfg.seed, TAG_CORPUS),
    };
    let (w, report, samples) = plan.run(init, |e| {
        log::info!("epoch {} loss {:.5}", e.epoch, e.train_loss)
    })?;

    let out = &cfg.output;
    fs::create_dir_all(out)?;
    save_weights(&w, out)?;
    let prov = cfg.provenance("train");
    fs::write(
        out.join("training_log.csv"),
        prov.csv_comment() + &report.to_csv(),
    )?;
    let summary = TrainSummary {
        provenance: prov,
        samples,
        parameters: w.param_count(),
        report,
    };
    write_json(&out.join("train_report.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub scenario: Scenario,
    pub metrics: MetricReport,
}

pub const BENCH_HEADER_PREFIX: &str = "method,scenario,";

/// Scores every method on every scenario of `cfg.bench` and writes
/// `table.csv`. SNR is averaged over the videos of a scenario.
pub fn cmd_bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let weights = load_model(cfg)?;
    let hash = cfg.config_hash();
    let b = &cfg.bench;
    let mut rows = Vec::new();
    for scenario in &b.scenarios {
        let mut spec = cfg.synth;
        scenario.apply(&mut spec.optics, &mut spec.noise);
        let corpus = CorpusSpec::fixed(b.videos, b.duration_s, b.hr_range, &spec);
        let videos = synthetic_corpus::<f32>(&spec, &corpus, sub_seed(cfg.seed, TAG_BENCH))?;
        for method in Method::ALL {
            let (mut pred, mut tru, mut snr) = (Vec::new(), Vec::new(), 0.0);
            for seq in &videos {
                let est = estimate(seq, method, Some(&weights), cfg)?;
                let truth = truth_f64(seq).expect("synthetic videos carry ground truth");
                for h in &est.hr {
                    pred.push(h.pred_bpm);
                    tru.push(h.true_bpm.expect("ground truth present"));
                }
                snr += snr_db(&est.bvp, estimate_hr(&truth, HR_BAND)?.bpm / 60.0, HR_BAND)?;
            }
            let mut m = metrics::<f64>(&pred, &tru, None, None, &hash)?;
            m.snr_db = Some(snr / videos.len() as f64);
            log::info!(
                "{} / {}: MAE {:.2}",
                method.name(),
                scenario.name(),
                m.mae_bpm
            );
            rows.push(BenchRow {
                method,
                scenario: *scenario,
                metrics: m,
            });
        }
    }
    let mut csv = format!("# config_hash={hash} seed={}\n", cfg.seed);
    csv.push_str("# snr_db: power near f0 and 2*f0 over the rest of the band, higher is cleaner\n");
    csv.push_str(BENCH_HEADER_PREFIX);
    csv.push_str(MetricReport::CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        writeln!(
            csv,
            "{},{},{}",
            r.method.name(),
            r.scenario.name(),
            r.metrics.csv_row()
        )
        .unwrap();
    }
    fs::create_dir_all(&cfg.output)?;
    fs::write(cfg.output.join("table.csv"), csv)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DutyReport {
    pub provenance: Provenance,
    pub sampler: SamplerConfig,
    pub energy_model: EnergyModel,
    pub energy: EnergyReport,
}

/// Replays the trace at `cfg.trace` through the sampler. Writes
/// `states.csv` (mode and action per event) and `energy_report.json`.
pub fn cmd_dutysim(cfg: &RunConfig) -> Result<DutyReport> {
    cfg.validate()?;
    let Some(path) = &cfg.trace else {
        return Err(Error::validation("dutysim needs a trace file"));
    };
    let trace = read_trace(BufReader::new(fs::File::open(path)?))?;
    let energy = simulate_energy(&trace, &cfg.sampler, &cfg.energy)?;
    let prov = cfg.provenance("dutysim");

    let mut states = prov.csv_comment();
    states.push_str("timestamp,mode,action\n");
    for (ev, (st, act)) in trace.iter().zip(replay(&trace, &cfg.sampler)?) {
        writeln!(states, "{:.6},{:?},{:?}", ev.timestamp, st.mode, act).unwrap();
    }
    fs::create_dir_all(&cfg.output)?;
    fs::write(cfg.output.join("states.csv"), states)?;
    let report = DutyReport {
        provenance: prov,
        sampler: cfg.sampler,
        energy_model: cfg.energy,
        energy,
    };
    write_json(&cfg.output.join("energy_report.json"), &report)?;
    Ok(report)
}
