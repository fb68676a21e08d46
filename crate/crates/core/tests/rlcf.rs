//! Policy-gradient estimator and fine-tuning loop on tiny models.

use cxrl::diffusion::{make_schedule, Denoiser, DenoiserConfig, Trajectory};
use cxrl::numcore::{OptimState, ParamStore, Precision, RngStream, Tensor};
use cxrl::phantom::make_dataset_sized;
use cxrl::rewards::{ClassifierModel, DualEncoder, Lambda, PostureModel, RewardModels};
use cxrl::rlcf::{
    finetune, policy_gradient_step, prompts_from_samples, reinforce_gradients, rollout_batch, AnchorModel,
    FinetuneState, Policy, Prompt, RlConfig, RlError,
};
use cxrl::textcond::{init_ace, init_encoder, AceEmbedding, ACE_PARAM};

const SIDE: usize = 8;

#[test]
fn estimator_recovers_the_gaussian_mean_gradient() {
    let theta = 0.3;
    let n = 100_000;
    let mut s = RngStream::new(1, "oracle");
    let xs: Vec<f64> = (0..n).map(|_| theta + s.normal()).collect();
    let mut store = ParamStore::new(Precision::F64);
    store.insert("theta", Tensor::vector(vec![theta]), false).unwrap();
    let (grads, _) = reinforce_gradients(&store, &xs, 1, |g, _| {
        let th = g.param("theta")?;
        let ones = g.constant(Tensor::full(vec![n, 1], 1.0))?;
        let th = g.reshape(th, vec![1, 1])?;
        let rep = g.matmul(ones, th)?;
        let rep = g.reshape(rep, vec![n])?;
        let x = g.constant(Tensor::vector(xs.clone()))?;
        let d = g.sub(x, rep)?;
        let sq = g.square(d)?;
        g.scale(sq, -0.5)
    })
    .unwrap();
    // The returned gradient is of the negated objective.
    let estimate = -grads.get("theta").unwrap().data()[0];
    let per: Vec<f64> = xs.iter().map(|x| x * (x - theta)).collect();
    let mean = per.iter().sum::<f64>() / n as f64;
    let var = per.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((estimate - mean).abs() < 1e-9);
    assert!((estimate - 1.0).abs() < 3.0 * se, "estimate {estimate}, se {se}");
}

struct Setup {
    pretrained: ParamStore,
    den: Denoiser,
    models: RewardModels,
    prompts: Vec<Prompt>,
}

fn setup(precision: Precision) -> Setup {
    let sched = make_schedule(4, 0.02, 0.3).unwrap();
    let cfg = DenoiserConfig {
        image_dim: SIDE * SIDE,
        hidden: 16,
        tokens: 4,
        d_tau: 8,
        time_dim: 8,
        steps: 4,
    };
    let mut s = RngStream::new(2, "setup");
    let mut pretrained = ParamStore::new(precision);
    init_encoder(&mut pretrained, cfg.d_tau, &mut s).unwrap();
    let den = Denoiser::init(&mut pretrained, cfg, &sched, &mut s).unwrap();
    // Nonzero head so the policy's output depends on every parameter.
    let w = pretrained.get("den.out.w").unwrap().value.clone();
    let w = Tensor::new(w.shape().to_vec(), w.data().iter().map(|_| 0.1 * s.normal()).collect()).unwrap();
    pretrained.set("den.out.w", w).unwrap();
    let dim = SIDE * SIDE;
    let models = RewardModels {
        posture: PostureModel::init(dim, Precision::F32, &mut s).unwrap(),
        classifier: ClassifierModel::init(dim, Precision::F32, &mut s).unwrap(),
        dual: DualEncoder::init(dim, 8, Precision::F32, &mut s).unwrap(),
    };
    let data = make_dataset_sized(3, 24, 4, SIDE).unwrap();
    let prompts = prompts_from_samples(&data.train, &pretrained).unwrap();
    Setup {
        pretrained,
        den,
        models,
        prompts,
    }
}

fn policy(s: &Setup, ace: &AceEmbedding) -> Policy {
    Policy::from_pretrained(&s.pretrained, s.den.clone(), make_schedule(4, 0.02, 0.3).unwrap(), ace).unwrap()
}

fn anchor(s: &Setup) -> AnchorModel {
    AnchorModel::new(&s.pretrained, s.den.clone(), make_schedule(4, 0.02, 0.3).unwrap())
}

fn small_cfg(steps: usize) -> RlConfig {
    RlConfig {
        batch: 4,
        steps,
        lr: 1e-3,
        ..RlConfig::smoke(5)
    }
}

#[test]
fn identical_policy_and_anchor_score_exactly_zero() {
    let s = setup(Precision::F32);
    let pol = policy(&s, &AceEmbedding::empty(8));
    let anc = anchor(&s);
    let lambda = Lambda {
        align: 0.0,
        ..Lambda::default()
    };
    let mut total = 0.0;
    let mut count = 0;
    for chunk in 0..32 {
        let picked: Vec<&Prompt> = (0..32).map(|i| &s.prompts[(chunk * 32 + i) % s.prompts.len()]).collect();
        let reps: Vec<&Tensor> = picked.iter().map(|p| &p.embedding).collect();
        let mut streams: Vec<RngStream> = (0..32).map(|i| RngStream::new(9, format!("null/{chunk}/{i}"))).collect();
        let pairs = rollout_batch(&pol, &anc, &reps, &mut streams, true).unwrap();
        let xs: Vec<_> = pairs.iter().map(|p| &p.image).collect();
        let xa: Vec<_> = pairs.iter().map(|p| &p.anchor_image).collect();
        let reports: Vec<&str> = picked.iter().map(|p| p.report.as_str()).collect();
        let labels: Vec<&[u8]> = picked.iter().map(|p| &p.labels[..]).collect();
        let r = s
            .models
            .score_pairs(&xs, &xa, &reports, &labels, lambda, Default::default())
            .unwrap();
        for (p, b) in pairs.iter().zip(&r) {
            assert_eq!(p.image, p.anchor_image);
            total += b.total;
            count += 1;
        }
    }
    assert!(count >= 1000);
    assert_eq!(total / count as f64, 0.0);
}

fn sampled(pol: &Policy, anc: &AnchorModel, s: &Setup, n: usize) -> Vec<Trajectory> {
    let reps: Vec<&Tensor> = s.prompts[..n].iter().map(|p| &p.embedding).collect();
    let mut streams: Vec<RngStream> = (0..n).map(|i| RngStream::new(11, format!("pg/{i}"))).collect();
    rollout_batch(pol, anc, &reps, &mut streams, true)
        .unwrap()
        .into_iter()
        .map(|p| p.trajectory)
        .collect()
}

#[test]
fn gradient_step_contracts() {
    let s = setup(Precision::F64);
    let ace = init_ace(3, 8, &mut RngStream::new(4, "ace"));
    let mut pol = policy(&s, &ace);
    let anc = anchor(&s);
    let trajs = sampled(&pol, &anc, &s, 3);
    let rewards = [0.7, -1.2, 0.4];
    let weighted = |k: f64| -> Vec<(&Trajectory, f64)> { trajs.iter().zip(rewards).map(|(t, r)| (t, k * r)).collect() };
    let cfg = small_cfg(1);

    // Linearity in the rewards.
    let mut scratch = pol.clone();
    let mut o = OptimState::new(&scratch.store, cfg.adam());
    let g1 = policy_gradient_step(&mut scratch, &weighted(1.0), &mut o, false, None).unwrap().gradients;
    let mut scratch = pol.clone();
    let mut o = OptimState::new(&scratch.store, cfg.adam());
    let g2 = policy_gradient_step(&mut scratch, &weighted(2.5), &mut o, false, None).unwrap().gradients;
    let (mut diff, mut norm) = (0.0, 0.0);
    for (name, a) in g1.iter() {
        for (x, y) in a.data().iter().zip(g2.get(name).unwrap().data()) {
            diff += (y - 2.5 * x).powi(2);
            norm += y * y;
        }
    }
    assert!(diff.sqrt() <= 1e-12 * norm.sqrt(), "{} vs {}", diff.sqrt(), norm.sqrt());
    // The condition rows receive gradient; the report encoder does not.
    assert!(g1.get(ACE_PARAM).unwrap().data().iter().any(|v| *v != 0.0));
    assert!(g1.iter().all(|(name, _)| !name.starts_with("text.")));

    // Zero rewards leave the parameters untouched.
    let mut scratch = pol.clone();
    let mut o = OptimState::new(&scratch.store, cfg.adam());
    policy_gradient_step(&mut scratch, &weighted(0.0), &mut o, false, Some(1.0)).unwrap();
    assert_eq!(scratch.store.content_hash(), pol.store.content_hash());

    // Trajectories from other parameters are rejected.
    let mut o = OptimState::new(&pol.store, cfg.adam());
    policy_gradient_step(&mut pol, &weighted(1.0), &mut o, false, None).unwrap();
    let err = policy_gradient_step(&mut pol, &weighted(1.0), &mut o, false, None).unwrap_err();
    assert!(matches!(err, RlError::OffPolicy { .. }));
}

#[test]
fn recomputed_log_density_matches_the_rollout() {
    let s = setup(Precision::F64);
    let ace = init_ace(3, 8, &mut RngStream::new(4, "ace"));
    let mut pol = policy(&s, &ace);
    let anc = anchor(&s);
    let trajs = sampled(&pol, &anc, &s, 3);
    let batch: Vec<(&Trajectory, f64)> = trajs.iter().map(|t| (t, 1.0)).collect();
    let mut o = OptimState::new(&pol.store, small_cfg(1).adam());
    let rep = policy_gradient_step(&mut pol, &batch, &mut o, false, None).unwrap();
    for (lp, t) in rep.logprob.iter().zip(&trajs) {
        let recorded: f64 = t.logprobs.iter().sum();
        assert!((lp - recorded).abs() < 1e-9 * recorded.abs().max(1.0));
    }
}

#[test]
fn interrupted_run_continues_identically_and_anchor_stays_fixed() {
    let s = setup(Precision::F32);
    let ace = init_ace(3, 8, &mut RngStream::new(4, "ace"));
    let anc = anchor(&s);
    let anchor_hash = anc.hash().to_string();
    let cfg = small_cfg(6);

    let mut full = FinetuneState::new(policy(&s, &ace), &cfg);
    let log_full = finetune(&mut full, &anc, &s.models, &s.prompts, &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(log_full.len(), 6);

    let mut saved = None;
    let mut first = FinetuneState::new(policy(&s, &ace), &cfg);
    let stop = |stats: &cxrl::rlcf::StepStats, st: &FinetuneState| {
        if stats.step == 2 {
            saved = Some(st.clone());
            return Err(RlError::Config("interrupted".into()));
        }
        Ok(())
    };
    assert!(finetune(&mut first, &anc, &s.models, &s.prompts, &cfg, stop).is_err());
    let mut resumed = saved.unwrap();
    assert_eq!(resumed.next_step, 3);
    let log_rest = finetune(&mut resumed, &anc, &s.models, &s.prompts, &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(log_rest.len(), 3);
    for (a, b) in log_full[3..].iter().zip(&log_rest) {
        assert_eq!((a.step, a.mean, a.std, a.grad_norm), (b.step, b.mean, b.std, b.grad_norm));
    }
    assert_eq!(resumed.policy.store.content_hash(), full.policy.store.content_hash());
    assert_ne!(full.policy.store.content_hash(), policy(&s, &ace).store.content_hash());
    assert_eq!(anc.store().content_hash(), anchor_hash);
}
