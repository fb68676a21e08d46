//! Pipeline stages behind the subcommands.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! data/                  phantom corpus (PGM images, meta.jsonl, manifest.txt)
//! generator.ckpt         pretrained generator (also the anchor)
//! pretrain_log.csv
//! rewards.ckpt           posture, classifier and dual-encoder parameters
//! reward_gates.csv
//! finetune_state.ckpt    resumable fine-tuning state
//! finetune_log.csv
//! finetuned.ckpt
//! samples/<model>/       PGM images and their reports
//! scores.csv  metrics.csv  comparison.csv  ablation.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::Checkpoint;
use super::config::Config;
use super::CliError;
use crate::diffusion::{pretrain_step, sample_batch, Denoiser, DenoiserConfig, DiffusionSchedule, PretrainItem};
use crate::evalkit::{auroc, frechet_distance, mean, ssim_diversity, t_test_greater};
use crate::fsio::atomic_write;
use crate::numcore::{AdamConfig, OptimState, ParamStore, Precision, RngStream, Tensor};
use crate::phantom::io::{encode_pgm, read_dataset, write_dataset, DumpError};
use crate::phantom::{make_dataset_sized, Dataset, Image, PhantomSample, K_LABELS};
use crate::rewards::{
    accuracy, fit_classifier, fit_dual_encoder_with, fit_posture, reward_align, ClassifierModel, DualEncoder, Lambda,
    PostureModel, RewardModels,
};
use crate::rlcf::{self, prompts_from_samples, AnchorModel, FinetuneState, Policy, Prompt, RlConfig, RlError, StepStats};
use crate::textcond::{encode_report, init_ace, init_encoder, tokenize, TokenSeq};

/// Paths of every artifact under one output directory.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub root: PathBuf,
}

impl Outputs {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn generator(&self) -> PathBuf {
        self.root.join("generator.ckpt")
    }

    pub fn rewards(&self) -> PathBuf {
        self.root.join("rewards.ckpt")
    }

    pub fn state(&self) -> PathBuf {
        self.root.join("finetune_state.ckpt")
    }

    pub fn finetuned(&self) -> PathBuf {
        self.root.join("finetuned.ckpt")
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

fn fail(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

impl From<RlError> for CliError {
    fn from(e: RlError) -> Self {
        match e {
            RlError::NonFinite(m) => CliError::Diverged(m),
            RlError::Diffusion(crate::diffusion::DiffusionError::NonFinite(t)) => {
                CliError::Diverged(format!("non-finite state at step {t}"))
            }
            other => CliError::Failed(other.to_string()),
        }
    }
}

/// Exclusive lock on an output directory, released on drop. The file holds
/// the owner's pid; a lock whose owner no longer exists (per `/proc`) is
/// taken over.
struct Lock(PathBuf);

fn owner_alive(path: &Path) -> bool {
    let Ok(text) = fs::read_to_string(path) else {
        return true;
    };
    match text.trim().parse::<u32>() {
        Ok(pid) if Path::new("/proc/self").exists() => Path::new(&format!("/proc/{pid}")).exists(),
        _ => true,
    }
}

impl Lock {
    fn acquire(root: &Path) -> Result<Self, CliError> {
        use std::io::Write;
        fs::create_dir_all(root).map_err(io_err(root))?;
        let path = root.join(".lock");
        for _ in 0..2 {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    f.write_all(std::process::id().to_string().as_bytes()).map_err(io_err(&path))?;
                    return Ok(Self(path));
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if owner_alive(&path) {
                        return Err(CliError::Locked(root.to_path_buf()));
                    }
                    let _ = fs::remove_file(&path);
                }
                Err(e) => return Err(io_err(&path)(e)),
            }
        }
        Err(CliError::Locked(root.to_path_buf()))
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    atomic_write(path, text.as_bytes()).map_err(io_err(path))
}

fn fmt(v: f64) -> String {
    format!("{v:.9e}")
}

fn denoiser_config(cfg: &Config) -> DenoiserConfig {
    DenoiserConfig {
        image_dim: cfg.image_size * cfg.image_size,
        hidden: cfg.hidden,
        d_tau: cfg.d_tau,
        steps: cfg.steps,
        ..DenoiserConfig::default()
    }
}

/// Schedule and denoiser handle for `cfg`.
pub fn generator_arch(cfg: &Config) -> Result<(Denoiser, DiffusionSchedule), CliError> {
    let sched = cfg.schedule().map_err(fail)?;
    Ok((Denoiser::new(denoiser_config(cfg), &sched), sched))
}

fn new_checkpoint(kind: &str, cfg: &Config, dataset_hash: &str) -> Checkpoint {
    let mut ck = Checkpoint::new(kind);
    ck.config = cfg.pairs();
    ck.meta.insert("config_hash".into(), cfg.hash());
    ck.meta.insert("dataset_hash".into(), dataset_hash.into());
    ck
}

// ---------------------------------------------------------------- data

pub fn phantom_gen(cfg: &Config) -> Result<(), CliError> {
    let out = Outputs::new(&cfg.output_dir);
    let _lock = Lock::acquire(&out.root)?;
    let data = make_dataset_sized(cfg.seed, cfg.n_train, cfg.n_test, cfg.image_size).map_err(fail)?;
    let tmp = out.root.join(".data.tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    let extra = vec![
        ("config_hash".to_string(), cfg.hash()),
        ("dataset_hash".to_string(), data.manifest.hash()),
    ];
    if let Err(e) = write_dataset(&tmp, &data, &extra) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(fail(e));
    }
    let dest = out.data();
    if dest.exists() {
        fs::remove_dir_all(&dest).map_err(io_err(&dest))?;
    }
    fs::rename(&tmp, &dest).map_err(io_err(&dest))?;
    eprintln!(
        "wrote {} train + {} test phantoms to {} (dataset {})",
        cfg.n_train,
        cfg.n_test,
        dest.display(),
        data.manifest.hash()
    );
    Ok(())
}

/// The dataset written by `phantom-gen`, checked against `cfg`.
pub fn load_dataset(cfg: &Config) -> Result<Dataset, CliError> {
    let dir = Outputs::new(&cfg.output_dir).data();
    let (data, _) = read_dataset(&dir).map_err(|e| match e {
        DumpError::Io { path, source } => CliError::Io {
            path,
            msg: format!("{source} (run phantom-gen first)"),
        },
        other => fail(other),
    })?;
    let m = &data.manifest;
    if (m.seed, m.n_train, m.n_test, m.image_size) != (cfg.seed, cfg.n_train, cfg.n_test, cfg.image_size) {
        return Err(CliError::DatasetMismatch(format!(
            "{} was generated with seed={} n_train={} n_test={} image_size={}",
            dir.display(),
            m.seed,
            m.n_train,
            m.n_test,
            m.image_size
        )));
    }
    Ok(data)
}

// ---------------------------------------------------------------- pretraining

/// Noise-prediction pretraining of the report encoder and denoiser. The
/// learning rate decays linearly to a tenth of `pretrain_lr`. `on_step`
/// receives `(step, loss)`.
pub fn pretrain_generator(
    cfg: &Config,
    train: &[PhantomSample],
    mut on_step: impl FnMut(usize, f64),
) -> Result<ParamStore, CliError> {
    if train.is_empty() {
        return Err(fail("empty training split"));
    }
    let sched = cfg.schedule().map_err(fail)?;
    let mut store = ParamStore::new(Precision::F32);
    init_encoder(&mut store, cfg.d_tau, &mut RngStream::new(cfg.seed, "pretrain/init/text")).map_err(fail)?;
    let den = Denoiser::init(&mut store, denoiser_config(cfg), &sched, &mut RngStream::new(cfg.seed, "pretrain/init/den"))
        .map_err(fail)?;
    let tokens: Vec<TokenSeq> = train.iter().map(|s| tokenize(&s.report)).collect();
    let mut optim = OptimState::new(
        &store,
        AdamConfig {
            lr: cfg.pretrain_lr,
            ..AdamConfig::default()
        },
    );
    let mut picks = RngStream::new(cfg.seed, "pretrain/batch");
    let mut noise = RngStream::new(cfg.seed, "pretrain/noise");
    let steps = cfg.pretrain_steps;
    for k in 0..steps {
        optim.config.lr = cfg.pretrain_lr * (1.0 - 0.9 * k as f64 / steps as f64);
        let items: Vec<PretrainItem<'_>> = (0..cfg.pretrain_batch)
            .map(|_| {
                let i = picks.below(train.len());
                PretrainItem {
                    x0: train[i].image.pixels(),
                    tokens: &tokens[i],
                }
            })
            .collect();
        let loss = pretrain_step(&mut store, &den, &sched, &items, &mut noise, &mut optim).map_err(|e| match e {
            crate::diffusion::DiffusionError::NonFinite(_) | crate::diffusion::DiffusionError::Graph(_) => {
                CliError::Diverged(format!("pretraining step {k}: {e}"))
            }
            other => fail(other),
        })?;
        if !loss.is_finite() {
            return Err(CliError::Diverged(format!("pretraining loss at step {k}")));
        }
        on_step(k, loss);
    }
    Ok(store)
}

pub fn pretrain(cfg: &Config) -> Result<(), CliError> {
    let out = Outputs::new(&cfg.output_dir);
    let _lock = Lock::acquire(&out.root)?;
    let data = load_dataset(cfg)?;
    let start = Instant::now();
    let mut log = String::from("step,loss,config_hash\n");
    let every = (cfg.pretrain_steps / 50).max(1);
    let mut window = Vec::new();
    let hash = cfg.hash();
    let store = pretrain_generator(cfg, &data.train, |k, loss| {
        window.push(loss);
        if (k + 1) % every == 0 || k + 1 == cfg.pretrain_steps {
            let m = mean(&window);
            log.push_str(&format!("{},{},{hash}\n", k + 1, fmt(m)));
            eprintln!("pretrain step {:>6}  loss {m:.5}  ({:.0}s)", k + 1, start.elapsed().as_secs_f64());
            window.clear();
        }
    })?;
    let mut ck = new_checkpoint("generator", cfg, &data.manifest.hash());
    ck.meta.insert("steps".into(), cfg.pretrain_steps.to_string());
    ck.stores.insert("generator".into(), store);
    ck.save(&out.generator())?;
    write_text(&out.file("pretrain_log.csv"), &log)?;
    Ok(())
}

/// Generator parameters and the dataset hash they were trained on.
pub fn load_generator(cfg: &Config, path: &Path) -> Result<(ParamStore, String), CliError> {
    let ck = Checkpoint::load(path)?;
    let store = ck.store("generator")?.clone();
    let (den, _) = generator_arch(cfg)?;
    for name in ["den.in.w", "den.out.w"] {
        if !store.contains(name) {
            return Err(fail(format!("{}: missing `{name}`", path.display())));
        }
    }
    let have = store.value("den.in.w").map_err(fail)?.shape().to_vec();
    if have != [den.cfg.image_dim, den.cfg.hidden] {
        return Err(fail(format!(
            "{}: generator shape {:?} does not match the config (image_size={}, hidden={})",
            path.display(),
            have,
            cfg.image_size,
            cfg.hidden
        )));
    }
    Ok((store, ck.meta("dataset_hash")?.to_string()))
}

// ---------------------------------------------------------------- rewards

/// Gate results on the test split.
#[derive(Clone, Debug)]
pub struct Gates {
    pub posture: crate::rewards::PostureReport,
    pub classifier: crate::rewards::ClassifierReport,
    pub retrieval: crate::rewards::RetrievalReport,
}

impl Gates {
    pub fn csv(&self, config_hash: &str) -> String {
        let p = &self.posture;
        let c = &self.classifier;
        let r = &self.retrieval;
        let rows = [
            ("posture_scale_mae", p.scale, 0.03, p.scale < 0.03),
            ("posture_shift_mae", p.shift, 0.02, p.shift < 0.02),
            ("posture_rotation_mae", p.rotation, 0.02, p.rotation < 0.02),
            ("classifier_macro_auroc", c.macro_auroc, 0.95, c.macro_auroc >= 0.95),
            ("dual_top1_retrieval", r.top1, 0.80, r.top1 >= 0.80),
            ("dual_own_beats_mismatch", r.own_beats_mismatch, 0.90, r.own_beats_mismatch >= 0.90),
        ];
        let mut s = String::from("gate,value,threshold,pass,config_hash\n");
        for (name, v, th, pass) in rows {
            s.push_str(&format!("{name},{},{th},{pass},{config_hash}\n", fmt(v)));
        }
        s
    }
}

pub fn fit_reward_models(cfg: &Config, train: &[PhantomSample]) -> Result<RewardModels, CliError> {
    let fit = cfg.reward_fit();
    let posture = fit_posture(train, &mut RngStream::new(cfg.seed, "rewards/posture"), &fit).map_err(fail)?;
    let classifier = fit_classifier(train, &mut RngStream::new(cfg.seed, "rewards/classifier"), &fit).map_err(fail)?;
    let dual = fit_dual_encoder_with(
        train,
        &mut RngStream::new(cfg.seed, "rewards/dual"),
        &fit,
        cfg.embed_dim,
        cfg.temperature,
    )
    .map_err(fail)?;
    Ok(RewardModels {
        posture,
        classifier,
        dual,
    })
}

pub fn evaluate_gates(cfg: &Config, models: &RewardModels, test: &[PhantomSample]) -> Result<Gates, CliError> {
    Ok(Gates {
        posture: models.posture.evaluate(test).map_err(fail)?,
        classifier: models.classifier.evaluate(test).map_err(fail)?,
        retrieval: models
            .dual
            .evaluate(test, 32, &mut RngStream::new(cfg.seed, "rewards/retrieval"))
            .map_err(fail)?,
    })
}

pub fn fit_rewards(cfg: &Config) -> Result<(), CliError> {
    let out = Outputs::new(&cfg.output_dir);
    let _lock = Lock::acquire(&out.root)?;
    let data = load_dataset(cfg)?;
    let start = Instant::now();
    let models = fit_reward_models(cfg, &data.train)?;
    let gates = evaluate_gates(cfg, &models, &data.test)?;
    eprintln!(
        "reward models fitted in {:.0}s: posture MAE scale {:.4} shift {:.4} rotation {:.4}; macro AUROC {:.4}; top-1 {:.3}",
        start.elapsed().as_secs_f64(),
        gates.posture.scale,
        gates.posture.shift,
        gates.posture.rotation,
        gates.classifier.macro_auroc,
        gates.retrieval.top1
    );
    let mut ck = new_checkpoint("rewards", cfg, &data.manifest.hash());
    ck.meta.insert("image_dim".into(), (cfg.image_size * cfg.image_size).to_string());
    ck.meta.insert("embed_dim".into(), models.dual.embed_dim().to_string());
    ck.meta.insert("temperature".into(), format!("{:?}", models.dual.temperature));
    ck.stores.insert("posture".into(), models.posture.store().clone());
    ck.stores.insert("classifier".into(), models.classifier.store().clone());
    ck.stores.insert("dual".into(), models.dual.store().clone());
    ck.save(&out.rewards())?;
    write_text(&out.file("reward_gates.csv"), &gates.csv(&cfg.hash()))?;
    Ok(())
}

/// Frozen reward models and the dataset hash they were fitted on.
pub fn load_rewards(path: &Path) -> Result<(RewardModels, String), CliError> {
    let ck = Checkpoint::load(path)?;
    let num = |k: &str| -> Result<f64, CliError> {
        ck.meta(k)?
            .parse()
            .map_err(|_| fail(format!("{}: bad `{k}`", path.display())))
    };
    let image_dim = num("image_dim")? as usize;
    let embed_dim = num("embed_dim")? as usize;
    let temperature = num("temperature")?;
    let models = RewardModels {
        posture: PostureModel::from_store(ck.store("posture")?.clone(), image_dim).map_err(fail)?,
        classifier: ClassifierModel::from_store(ck.store("classifier")?.clone(), image_dim).map_err(fail)?,
        dual: DualEncoder::from_store(ck.store("dual")?.clone(), image_dim, embed_dim, temperature).map_err(fail)?,
    };
    Ok((models, ck.meta("dataset_hash")?.to_string()))
}

// ---------------------------------------------------------------- fine-tuning

/// Starting policy: pretrained weights plus freshly drawn condition rows.
pub fn initial_policy(cfg: &Config, pretrained: &ParamStore) -> Result<Policy, CliError> {
    let (den, sched) = generator_arch(cfg)?;
    let ace = init_ace(cfg.n_ace, cfg.d_tau, &mut RngStream::new(cfg.seed, "ace/init"));
    Ok(Policy::from_pretrained(pretrained, den, sched, &ace)?)
}

pub fn anchor_model(cfg: &Config, pretrained: &ParamStore) -> Result<AnchorModel, CliError> {
    let (den, sched) = generator_arch(cfg)?;
    Ok(AnchorModel::new(pretrained, den, sched))
}

fn state_checkpoint(cfg: &Config, rl: &RlConfig, state: &FinetuneState, dataset_hash: &str, anchor_hash: &str) -> Checkpoint {
    let mut ck = new_checkpoint("finetune-state", cfg, dataset_hash);
    ck.meta.insert("next_step".into(), state.next_step.to_string());
    ck.meta.insert("anchor_hash".into(), anchor_hash.into());
    ck.meta.insert("rl_steps".into(), rl.steps.to_string());
    ck.stores.insert("policy".into(), state.policy.store.clone());
    ck.optims.insert("policy".into(), state.optim.clone());
    ck
}

fn load_state(cfg: &Config, path: &Path, anchor_hash: &str) -> Result<FinetuneState, CliError> {
    let ck = Checkpoint::load(path)?;
    if ck.meta("config_hash")? != cfg.hash() {
        return Err(CliError::Config(super::ConfigError::Invalid(format!(
            "{} was written under config {}, current config is {}",
            path.display(),
            ck.meta("config_hash")?,
            cfg.hash()
        ))));
    }
    if ck.meta("anchor_hash")? != anchor_hash {
        return Err(fail(format!("{}: anchor changed since the state was saved", path.display())));
    }
    let (den, sched) = generator_arch(cfg)?;
    let next_step = ck
        .meta("next_step")?
        .parse()
        .map_err(|_| fail(format!("{}: bad next_step", path.display())))?;
    let optim = ck
        .optims
        .get("policy")
        .cloned()
        .ok_or_else(|| fail(format!("{}: no optimizer state", path.display())))?;
    Ok(FinetuneState {
        policy: Policy {
            store: ck.store("policy")?.clone(),
            den,
            sched,
        },
        optim,
        next_step,
    })
}

/// Runs the RL loop from `state` without touching the filesystem.
pub fn run_finetune(
    state: &mut FinetuneState,
    anchor: &AnchorModel,
    models: &RewardModels,
    prompts: &[Prompt],
    rl: &RlConfig,
    mut on_step: impl FnMut(&StepStats, &FinetuneState) -> Result<(), RlError>,
) -> Result<Vec<StepStats>, CliError> {
    Ok(rlcf::finetune(state, anchor, models, prompts, rl, &mut on_step)?)
}

pub fn finetune(cfg: &Config, resume: bool, max_steps: Option<usize>) -> Result<(), CliError> {
    let out = Outputs::new(&cfg.output_dir);
    let _lock = Lock::acquire(&out.root)?;
    let data = load_dataset(cfg)?;
    let (pretrained, gen_hash) = load_generator(cfg, &out.generator())?;
    let (models, rew_hash) = load_rewards(&out.rewards())?;
    let dataset_hash = data.manifest.hash();
    if gen_hash != dataset_hash || rew_hash != dataset_hash {
        return Err(CliError::DatasetMismatch(format!(
            "dataset {dataset_hash}, generator {gen_hash}, reward models {rew_hash}"
        )));
    }
    let anchor = anchor_model(cfg, &pretrained)?;
    let anchor_hash = anchor.hash().to_string();
    let rl = cfg.rl();
    let prompts = prompts_from_samples(&data.train, &pretrained)?;
    let hash = cfg.hash();

    let log_path = out.file("finetune_log.csv");
    let mut rows: Vec<String> = Vec::new();
    let mut state = if resume && out.state().exists() {
        let st = load_state(cfg, &out.state(), &anchor_hash)?;
        let text = fs::read_to_string(&log_path).map_err(io_err(&log_path))?;
        rows = text.lines().skip(1).take(st.next_step).map(str::to_string).collect();
        if rows.len() != st.next_step {
            return Err(fail(format!("{} has fewer rows than the saved state", log_path.display())));
        }
        eprintln!("resuming fine-tuning at step {}", st.next_step);
        st
    } else {
        FinetuneState::new(initial_policy(cfg, &pretrained)?, &rl)
    };
    let stop = max_steps.unwrap_or(rl.steps).min(rl.steps);
    let run_cfg = RlConfig { steps: stop, ..rl };
    let write_log = |rows: &[String]| -> Result<(), RlError> {
        let mut text = String::from(StepStats::CSV_HEADER);
        text.push('\n');
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        atomic_write(&log_path, text.as_bytes()).map_err(|e| RlError::Hook(e.to_string()))
    };
    let save_state = |st: &FinetuneState| -> Result<(), RlError> {
        state_checkpoint(cfg, &rl, st, &dataset_hash, &anchor_hash)
            .save(&out.state())
            .map_err(|e| RlError::Hook(e.to_string()))
    };
    let every = cfg.checkpoint_every;
    run_finetune(&mut state, &anchor, &models, &prompts, &run_cfg, |s, st| {
        rows.push(s.csv_row(&hash));
        eprintln!(
            "step {:>4}  align {:+.4}  diag {:+.4}  consist {:+.4}  total {:+.4}  |g| {:.3}  {:.1}s",
            s.step,
            s.mean_r_align(),
            s.mean_r_diag(),
            s.mean_r_consist(),
            s.mean_total(),
            s.grad_norm,
            s.seconds
        );
        if st.next_step % every == 0 || st.next_step == stop {
            write_log(&rows)?;
            save_state(st)?;
        }
        Ok(())
    })?;
    write_log(&rows)?;
    save_state(&state)?;
    if anchor.store().content_hash() != anchor_hash {
        return Err(fail("anchor parameters changed during fine-tuning"));
    }
    if state.next_step < rl.steps {
        eprintln!("stopped at step {} of {}", state.next_step, rl.steps);
        return Ok(());
    }
    let mut ck = new_checkpoint("finetuned", cfg, &dataset_hash);
    ck.meta.insert("anchor_hash_start".into(), anchor_hash.clone());
    ck.meta.insert("anchor_hash_end".into(), anchor.store().content_hash());
    ck.meta.insert("rl_steps".into(), rl.steps.to_string());
    ck.stores.insert("generator".into(), state.policy.store.clone());
    ck.save(&out.finetuned())?;
    Ok(())
}

// ---------------------------------------------------------------- generation

/// One image per prompt embedding. Entry `i` draws all of its noise from
/// `<label>/<i>`, so the anchor and the fine-tuned model see the same noise
/// for the same index.
pub fn generate(
    store: &ParamStore,
    den: &Denoiser,
    sched: &DiffusionSchedule,
    use_ace: bool,
    reports: &[&Tensor],
    seed: u64,
    label: &str,
) -> Result<Vec<Image>, CliError> {
    const CHUNK: usize = 32;
    let mut images = Vec::with_capacity(reports.len());
    for (c, chunk) in reports.chunks(CHUNK).enumerate() {
        let mut streams: Vec<RngStream> = (0..chunk.len())
            .map(|j| RngStream::new(seed, format!("{label}/{}", c * CHUNK + j)))
            .collect();
        let trajs = sample_batch(store, den, sched, use_ace, chunk, &mut streams, false).map_err(|e| match e {
            crate::diffusion::DiffusionError::NonFinite(t) => CliError::Diverged(format!("sampling step {t}")),
            other => fail(other),
        })?;
        images.extend(trajs.iter().map(|t| t.final_image()));
    }
    Ok(images)
}

/// A generator ready to sample: anchor (no condition rows) or fine-tuned.
pub struct Generator {
    pub name: String,
    pub store: ParamStore,
    pub use_ace: bool,
}

fn load_models_for_eval(cfg: &Config, force: bool) -> Result<(Dataset, Generator, Generator, RewardModels), CliError> {
    let out = Outputs::new(&cfg.output_dir);
    let data = load_dataset(cfg)?;
    let (anchor, gen_hash) = load_generator(cfg, &out.generator())?;
    let (tuned, tuned_hash) = load_generator(cfg, &out.finetuned())?;
    let (models, rew_hash) = load_rewards(&out.rewards())?;
    let dataset_hash = data.manifest.hash();
    if !force && [&gen_hash, &tuned_hash, &rew_hash].iter().any(|h| **h != dataset_hash) {
        return Err(CliError::DatasetMismatch(format!(
            "dataset {dataset_hash}, generator {gen_hash}, fine-tuned {tuned_hash}, reward models {rew_hash}"
        )));
    }
    Ok((
        data,
        Generator {
            name: "anchor".into(),
            store: anchor,
            use_ace: false,
        },
        Generator {
            name: "finetuned".into(),
            store: tuned,
            use_ace: true,
        },
        models,
    ))
}

pub fn sample(cfg: &Config, model: &str, reports: &[String]) -> Result<(), CliError> {
    let out = Outputs::new(&cfg.output_dir);
    let _lock = Lock::acquire(&out.root)?;
    let path = match model {
        "anchor" => out.generator(),
        "finetuned" => out.finetuned(),
        other => return Err(CliError::Usage(format!("unknown model `{other}` (anchor or finetuned)"))),
    };
    let (store, _) = load_generator(cfg, &path)?;
    let texts: Vec<String> = if reports.is_empty() {
        load_dataset(cfg)?.test.iter().take(8).map(|s| s.report.clone()).collect()
    } else {
        reports.to_vec()
    };
    let emb: Vec<Tensor> = texts
        .iter()
        .map(|t| encode_report(&tokenize(t), &store))
        .collect::<Result<_, _>>()
        .map_err(fail)?;
    let refs: Vec<&Tensor> = emb.iter().collect();
    let (den, sched) = generator_arch(cfg)?;
    let images = generate(&store, &den, &sched, model == "finetuned", &refs, cfg.seed, "sample")?;
    let dir = out.root.join("samples").join(model);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut index = String::from("index,report\n");
    for (i, (img, text)) in images.iter().zip(&texts).enumerate() {
        let p = dir.join(format!("{i}.pgm"));
        atomic_write(&p, &encode_pgm(img)).map_err(io_err(&p))?;
        index.push_str(&format!("{i},\"{}\"\n", text.replace('"', "\"\"")));
    }
    write_text(&dir.join("reports.csv"), &index)
}

// ---------------------------------------------------------------- evaluation

/// Per-image quantities and set-level metrics of one generator.
#[derive(Clone, Debug)]
pub struct ModelEval {
    pub name: String,
    pub n: usize,
    pub r_align: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub similarity: Vec<f64>,
    pub per_class_auroc: [f64; K_LABELS],
    pub macro_auroc: f64,
    pub frechet: f64,
    pub ssim: f64,
}

pub const METRICS_HEADER: &str = "model,config_hash,dataset_hash,n,mean_r_align,auroc_effusion,auroc_cardiomegaly,\
auroc_opacity,auroc_device,macro_auroc,mean_similarity,mean_accuracy,frechet,ssim_diversity";

impl ModelEval {
    pub fn mean_r_align(&self) -> f64 {
        mean(&self.r_align)
    }

    pub fn mean_similarity(&self) -> f64 {
        mean(&self.similarity)
    }

    pub fn csv_row(&self, config_hash: &str, dataset_hash: &str) -> String {
        let aucs: Vec<String> = self.per_class_auroc.iter().map(|&v| fmt(v)).collect();
        format!(
            "{},{config_hash},{dataset_hash},{},{},{},{},{},{},{},{}",
            self.name,
            self.n,
            fmt(self.mean_r_align()),
            aucs.join(","),
            fmt(self.macro_auroc),
            fmt(self.mean_similarity()),
            fmt(mean(&self.accuracy)),
            fmt(self.frechet),
            fmt(self.ssim)
        )
    }
}

/// Generates one image per prompt and scores the set.
pub fn evaluate_generator(
    cfg: &Config,
    gen: &Generator,
    prompts: &[&PhantomSample],
    real_features: &[Vec<f64>],
    models: &RewardModels,
) -> Result<ModelEval, CliError> {
    let (den, sched) = generator_arch(cfg)?;
    let emb: Vec<Tensor> = prompts
        .iter()
        .map(|s| encode_report(&tokenize(&s.report), &gen.store))
        .collect::<Result<_, _>>()
        .map_err(fail)?;
    let refs: Vec<&Tensor> = emb.iter().collect();
    let images = generate(&gen.store, &den, &sched, gen.use_ace, &refs, cfg.seed, "eval")?;
    score_images(cfg, &gen.name, &images, prompts, real_features, models)
}

pub fn score_images(
    cfg: &Config,
    name: &str,
    images: &[Image],
    prompts: &[&PhantomSample],
    real_features: &[Vec<f64>],
    models: &RewardModels,
) -> Result<ModelEval, CliError> {
    let imgs: Vec<&Image> = images.iter().collect();
    let psi = models.posture.estimate_batch(&imgs).map_err(fail)?;
    let probs = models.classifier.probabilities(&imgs).map_err(fail)?;
    let feats = models.classifier.features(&imgs).map_err(fail)?;
    let img_emb = models.dual.embed_images(&imgs).map_err(fail)?;
    let texts: Vec<&str> = prompts.iter().map(|s| s.report.as_str()).collect();
    let txt_emb = models.dual.embed_reports(&texts).map_err(fail)?;
    let mut acc = Vec::with_capacity(images.len());
    for (p, s) in probs.iter().zip(prompts) {
        acc.push(accuracy(p, &s.labels, cfg.accuracy).map_err(fail)?);
    }
    let mut per_class = [0.0; K_LABELS];
    for (k, slot) in per_class.iter_mut().enumerate() {
        let scores: Vec<f64> = probs.iter().map(|p| p[k]).collect();
        let labels: Vec<u8> = prompts.iter().map(|s| s.labels[k]).collect();
        *slot = auroc(&scores, &labels).map_err(fail)?;
    }
    Ok(ModelEval {
        name: name.into(),
        n: images.len(),
        r_align: psi.iter().map(reward_align).collect(),
        accuracy: acc,
        similarity: img_emb
            .iter()
            .zip(&txt_emb)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum())
            .collect(),
        macro_auroc: per_class.iter().sum::<f64>() / K_LABELS as f64,
        per_class_auroc: per_class,
        frechet: frechet_distance(&feats, real_features).map_err(fail)?,
        ssim: ssim_diversity(images, cfg.ssim_pairs, &RngStream::new(cfg.seed, "eval/ssim")).map_err(fail)?,
    })
}

pub const COMPARISON_HEADER: &str = "metric,mean_anchor,mean_finetuned,mean_difference,relative_improvement,t,p_value,n";

/// Paired per-report comparison of the fine-tuned model against the anchor.
/// `r_diag` and `r_consist` are the comparative rewards themselves; the
/// one-sided test is for a positive mean difference.
pub fn comparison_csv(anchor: &ModelEval, tuned: &ModelEval, lambda: Lambda) -> Result<String, CliError> {
    let diff = |a: &[f64], b: &[f64]| -> Vec<f64> { b.iter().zip(a).map(|(x, y)| x - y).collect() };
    let d_align = diff(&anchor.r_align, &tuned.r_align);
    let d_diag = diff(&anchor.accuracy, &tuned.accuracy);
    let d_consist = diff(&anchor.similarity, &tuned.similarity);
    let total: Vec<f64> = (0..d_align.len())
        .map(|i| lambda.align * tuned.r_align[i] + lambda.diag * d_diag[i] + lambda.consist * d_consist[i])
        .collect();
    let total_anchor: Vec<f64> = anchor.r_align.iter().map(|r| lambda.align * r).collect();
    let mut s = String::from(COMPARISON_HEADER);
    s.push('\n');
    let rows: [(&str, &[f64], &[f64], &[f64]); 4] = [
        ("r_align", &anchor.r_align, &tuned.r_align, &d_align),
        ("r_diag", &anchor.accuracy, &tuned.accuracy, &d_diag),
        ("r_consist", &anchor.similarity, &tuned.similarity, &d_consist),
        ("total", &total_anchor, &total, &total),
    ];
    for (name, a, b, d) in rows {
        let (t, p) = t_test_greater(d, 0.0).map_err(fail)?;
        let ma = mean(a);
        let rel = if ma != 0.0 { (mean(b) - ma) / ma.abs() } else { 0.0 };
        s.push_str(&format!(
            "{name},{},{},{},{},{},{},{}\n",
            fmt(ma),
            fmt(mean(b)),
            fmt(mean(d)),
            fmt(rel),
            fmt(t),
            fmt(p),
            d.len()
        ));
    }
    Ok(s)
}

fn eval_prompts<'a>(cfg: &Config, data: &'a Dataset) -> Result<Vec<&'a PhantomSample>, CliError> {
    if cfg.eval_n > data.test.len() {
        return Err(CliError::Config(super::ConfigError::Invalid(format!(
            "eval_n={} exceeds the {} test samples",
            cfg.eval_n,
            data.test.len()
        ))));
    }
    Ok(data.test.iter().take(cfg.eval_n).collect())
}

fn real_features(models: &RewardModels, data: &Dataset) -> Result<Vec<Vec<f64>>, CliError> {
    let imgs: Vec<&Image> = data.test.iter().map(|s| &s.image).collect();
    let mut out = Vec::with_capacity(imgs.len());
    for chunk in imgs.chunks(256) {
        out.extend(models.classifier.features(chunk).map_err(fail)?);
    }
    Ok(out)
}

pub fn eval(cfg: &Config, force: bool) -> Result<(), CliError> {
    let out = Outputs::new(&cfg.output_dir);
    let _lock = Lock::acquire(&out.root)?;
    let (data, anchor, tuned, models) = load_models_for_eval(cfg, force)?;
    let prompts = eval_prompts(cfg, &data)?;
    let real = real_features(&models, &data)?;
    let a = evaluate_generator(cfg, &anchor, &prompts, &real, &models)?;
    let f = evaluate_generator(cfg, &tuned, &prompts, &real, &models)?;
    let (hash, dh) = (cfg.hash(), data.manifest.hash());
    let metrics = format!("{METRICS_HEADER}\n{}\n{}\n", a.csv_row(&hash, &dh), f.csv_row(&hash, &dh));
    write_text(&out.file("metrics.csv"), &metrics)?;
    write_text(&out.file("comparison.csv"), &comparison_csv(&a, &f, cfg.lambda)?)?;
    eprint!("{metrics}");
    Ok(())
}

pub fn score(cfg: &Config) -> Result<(), CliError> {
    let out = Outputs::new(&cfg.output_dir);
    let _lock = Lock::acquire(&out.root)?;
    let (data, anchor, tuned, models) = load_models_for_eval(cfg, false)?;
    let prompts = eval_prompts(cfg, &data)?;
    let (den, sched) = generator_arch(cfg)?;
    let mut sets = Vec::new();
    for gen in [&tuned, &anchor] {
        let emb: Vec<Tensor> = prompts
            .iter()
            .map(|s| encode_report(&tokenize(&s.report), &gen.store))
            .collect::<Result<_, _>>()
            .map_err(fail)?;
        let refs: Vec<&Tensor> = emb.iter().collect();
        sets.push(generate(&gen.store, &den, &sched, gen.use_ace, &refs, cfg.seed, "eval")?);
    }
    let xs: Vec<&Image> = sets[0].iter().collect();
    let xa: Vec<&Image> = sets[1].iter().collect();
    let reports: Vec<&str> = prompts.iter().map(|s| s.report.as_str()).collect();
    let labels: Vec<&[u8]> = prompts.iter().map(|s| &s.labels[..]).collect();
    let scores = models
        .score_pairs(&xs, &xa, &reports, &labels, cfg.lambda, cfg.accuracy)
        .map_err(fail)?;
    let hash = cfg.hash();
    let mut s = String::from("index,r_align,r_diag,r_consist,total,config_hash\n");
    for (i, r) in scores.iter().enumerate() {
        s.push_str(&format!(
            "{i},{},{},{},{},{hash}\n",
            fmt(r.r_align),
            fmt(r.r_diag),
            fmt(r.r_consist),
            fmt(r.total)
        ));
    }
    write_text(&out.file("scores.csv"), &s)
}

// ---------------------------------------------------------------- ablation

pub const ABLATION_HEADER: &str =
    "row,lambda_align,lambda_diag,lambda_consist,rl_steps,config_hash,mean_r_align,macro_auroc,mean_similarity,frechet,ssim_diversity";

/// Row names and reward masks, in table order. The anchor row is not
/// fine-tuned at all.
pub fn ablation_rows(full: Lambda) -> [(&'static str, Lambda); 5] {
    let zero = Lambda {
        align: 0.0,
        diag: 0.0,
        consist: 0.0,
    };
    [
        ("anchor", zero),
        ("+r_align", Lambda { align: full.align, ..zero }),
        ("+r_diag", Lambda { diag: full.diag, ..zero }),
        ("+r_consist", Lambda { consist: full.consist, ..zero }),
        ("combined", full),
    ]
}

pub fn ablate(cfg: &Config) -> Result<(), CliError> {
    let out = Outputs::new(&cfg.output_dir);
    let _lock = Lock::acquire(&out.root)?;
    let data = load_dataset(cfg)?;
    let (pretrained, gen_hash) = load_generator(cfg, &out.generator())?;
    let (models, rew_hash) = load_rewards(&out.rewards())?;
    let dataset_hash = data.manifest.hash();
    if gen_hash != dataset_hash || rew_hash != dataset_hash {
        return Err(CliError::DatasetMismatch(format!(
            "dataset {dataset_hash}, generator {gen_hash}, reward models {rew_hash}"
        )));
    }
    let anchor = anchor_model(cfg, &pretrained)?;
    let train_prompts = prompts_from_samples(&data.train, &pretrained)?;
    let prompts = eval_prompts(cfg, &data)?;
    let real = real_features(&models, &data)?;
    let mut table = String::from(ABLATION_HEADER);
    table.push('\n');
    for (name, lambda) in ablation_rows(cfg.lambda) {
        let row_cfg = Config {
            lambda,
            rl_steps: cfg.ablate_steps,
            ..cfg.clone()
        };
        let gen = if name == "anchor" {
            Generator {
                name: name.into(),
                store: pretrained.clone(),
                use_ace: false,
            }
        } else {
            let rl = row_cfg.rl();
            let mut state = FinetuneState::new(initial_policy(&row_cfg, &pretrained)?, &rl);
            let start = Instant::now();
            run_finetune(&mut state, &anchor, &models, &train_prompts, &rl, |_, _| Ok(()))?;
            eprintln!("ablation {name}: {} steps in {:.0}s", rl.steps, start.elapsed().as_secs_f64());
            Generator {
                name: name.into(),
                store: state.policy.store,
                use_ace: true,
            }
        };
        let m = evaluate_generator(&row_cfg, &gen, &prompts, &real, &models)?;
        table.push_str(&format!(
            "{name},{:?},{:?},{:?},{},{},{},{},{},{},{}\n",
            lambda.align,
            lambda.diag,
            lambda.consist,
            row_cfg.rl_steps,
            row_cfg.hash(),
            fmt(m.mean_r_align()),
            fmt(m.macro_auroc),
            fmt(m.mean_similarity()),
            fmt(m.frechet),
            fmt(m.ssim)
        ));
    }
    write_text(&out.file("ablation.csv"), &table)?;
    eprint!("{table}");
    Ok(())
}
