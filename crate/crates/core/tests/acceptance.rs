//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if an enforced check fails.

mod common;

use std::time::{Duration, Instant};

use cilda_core::augment::{
    generate_adversarial, generate_adversarial_with_noise, gumbel_noise, mask_tokens, sample_adversarial_ids,
    MaskPolicy,
};
use cilda_core::data::{gen_synthetic, Batch, EncodedDataset, SyntheticTaskSpec, CLS, PAD, SEP};
use cilda_core::evalkit::{evaluate, logit_divergence};
use cilda_core::losses::{
    crd_loss, cross_entropy, generator_objective, kd_kl, student_objective, BoundHead, LossWeights,
};
use cilda_core::nn::EncoderConfig;
use cilda_core::numerics::{check_gradient, check_gradients, Graph, Tensor, Var, DEFAULT_STEP};
use cilda_core::rng::{stream, substream, Stream};
use cilda_core::training::{
    init_generator, init_student, train_cilda, train_teacher, warmup_generator_mlm, Checkpoint, Mode,
    SupervisedConfig, TrainConfig, TrainState, WarmupConfig,
};
use cilda_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{tiny_batch, tiny_task, trio, TINY_MAX_LEN};

struct Outcome {
    pass: bool,
    /// Whether the non-directional part held; only this is enforced.
    enforced_ok: bool,
    detail: String,
}

impl Outcome {
    fn strict(pass: bool, detail: String) -> Self {
        Self { pass, enforced_ok: pass, detail }
    }
}

fn main() {
    let checks: [(u32, &str, Duration, fn() -> Outcome); 10] = [
        (1, "gradient fidelity", Duration::from_secs(60), gradient_fidelity),
        (2, "contrastive loss oracle", Duration::from_secs(10), crd_oracle_equivalence),
        (3, "KL hand values", Duration::from_secs(5), kl_hand_values),
        (4, "maximization efficacy", Duration::from_secs(120), maximization_efficacy),
        (5, "mode reductions", Duration::from_secs(30), mode_reductions),
        (6, "desk-scale accuracy ordering", Duration::from_secs(15 * 60), desk_accuracy),
        (7, "desk-scale logit divergence", Duration::from_secs(15 * 60), desk_divergence),
        (8, "desk-scale out-of-domain", Duration::from_secs(15 * 60), desk_ood),
        (9, "determinism and persistence", Duration::from_secs(60), determinism),
        (10, "augmentation contracts", Duration::from_secs(60), augmentation_contracts),
    ];
    let mut enforced_failures = 0;
    for (n, name, budget, check) in checks {
        let start = Instant::now();
        let out = check();
        let elapsed = start.elapsed();
        let in_budget = elapsed <= budget;
        let pass = out.pass && in_budget;
        if !(out.enforced_ok && in_budget) {
            enforced_failures += 1;
        }
        println!(
            "criterion {n:>2} {:<4} {name}: {} [{:.1}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if enforced_failures > 0 {
        eprintln!("{enforced_failures} enforced acceptance check(s) failed");
        std::process::exit(1);
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn probe<'g>(y: Var<'g>) -> Result<Var<'g>> {
    let shape = y.shape();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 23) as f64 - 11.0) / 7.0).collect();
    let w = y.graph().constant(Tensor::new(shape, w)?);
    Ok(y.mul(w)?.sum())
}

type Unary = for<'g> fn(Var<'g>) -> Result<Var<'g>>;
type Binary = for<'g> fn(Var<'g>, Var<'g>) -> Result<Var<'g>>;

// ---------------------------------------------------------------- criterion 1

fn primitive_errors(rng: &mut ChaCha8Rng) -> Result<Vec<(&'static str, f64)>> {
    let unary: [(&str, &[usize], f64, Unary); 16] = [
        ("scale", &[5], -2.0, |a| Ok(a.scale(-1.7))),
        ("exp", &[2, 3], -2.0, |a| Ok(a.exp())),
        ("log", &[2, 3], 0.2, |a| a.log()),
        ("gelu", &[2, 5], -2.0, |a| Ok(a.gelu())),
        ("transpose", &[2, 3, 4], -2.0, |a| a.transpose(0, 2)),
        ("reshape", &[2, 6], -2.0, |a| a.reshape(&[3, 4])),
        ("slice", &[3, 5], -2.0, |a| a.slice(1, 1, 3)),
        ("sum", &[2, 3], -2.0, |a| Ok(a.sum())),
        ("sum_axis", &[2, 3, 4], -2.0, |a| a.sum_axis(1)),
        ("mean", &[2, 3], -2.0, |a| Ok(a.mean())),
        ("mean_axis", &[2, 3], -2.0, |a| a.mean_axis(0)),
        ("gather", &[5, 3], -2.0, |a| a.gather(&[4, 0, 4, 2], &[2, 2])),
        ("softmax", &[3, 4], -2.0, |a| a.softmax(1)),
        ("log_softmax", &[3, 4], -2.0, |a| a.log_softmax(1)),
        ("l2_normalize", &[3, 4], -2.0, |a| a.l2_normalize()),
        ("dropout", &[4, 4], -2.0, |a| a.dropout(0.3, &mut ChaCha8Rng::seed_from_u64(9))),
    ];
    let binary: [(&str, &[usize], &[usize], Binary); 6] = [
        ("add", &[2, 3, 4], &[4], |a, b| a.add(b)),
        ("sub", &[3, 4], &[3, 4], |a, b| a.sub(b)),
        ("mul", &[2, 3, 4], &[3, 4], |a, b| a.mul(b)),
        ("matmul", &[2, 3, 4], &[4, 5], |a, b| a.matmul(b)),
        ("concat", &[2, 3], &[2, 2], |a, b| Var::concat(&[a, b], 1)),
        ("cosine_similarity", &[3, 4], &[2, 4], |a, b| a.cosine_similarity(b)),
    ];
    let mut out = Vec::new();
    for (name, shape, lo, f) in unary {
        let x = uniform(rng, shape, lo, 2.0);
        out.push((name, check_gradient(|_, v| probe(f(v)?), &x, DEFAULT_STEP)?));
    }
    for (name, sa, sb, f) in binary {
        let xs = [uniform(rng, sa, -2.0, 2.0), uniform(rng, sb, -2.0, 2.0)];
        out.push((name, check_gradients(|_, v| probe(f(v[0], v[1])?), &xs, DEFAULT_STEP, None)?));
    }
    let xs = [uniform(rng, &[3, 5], -2.0, 2.0), uniform(rng, &[5], 0.5, 1.5), uniform(rng, &[5], -1.0, 1.0)];
    out.push((
        "layer_norm",
        check_gradients(|_, v| probe(v[0].layer_norm(v[1], v[2], 1e-5)?), &xs, DEFAULT_STEP, None)?,
    ));
    Ok(out)
}

fn loss_errors(rng: &mut ChaCha8Rng) -> Result<Vec<(&'static str, f64)>> {
    let pair = [uniform(rng, &[3, 4], -2.0, 2.0), uniform(rng, &[3, 4], -2.0, 2.0)];
    let kl = check_gradients(|_, v| kd_kl(v[0], v[1], 1.5, false), &pair, DEFAULT_STEP, None)?;
    let ce = check_gradient(|_, v| cross_entropy(v, &[0, 3, 1]), &pair[0], DEFAULT_STEP)?;
    let reps = [uniform(rng, &[4, 3], -2.0, 2.0), uniform(rng, &[4, 3], -2.0, 2.0)];
    let crd = check_gradients(
        |_, v| crd_loss(v[0].l2_normalize()?, v[1].l2_normalize()?, 2.0),
        &reps,
        DEFAULT_STEP,
        None,
    )?;
    Ok(vec![("kd_kl", kl), ("cross_entropy", ce), ("crd_loss", crd)])
}

fn objective_errors() -> Result<Vec<(&'static str, f64)>> {
    let t = trio(16, 21);
    let orig = tiny_batch(2, 4);
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let masked = mask_tokens(&orig, &MaskPolicy::with_p(0.5)?, &mut rng);
    assert!(masked.num_masked() > 0);
    let noise = gumbel_noise(&[orig.ids.len(), t.generator.config.vocab_size], &mut rng);
    let anchor = {
        let g = Graph::new();
        generate_adversarial_with_noise(&t.generator.bind(&g, false), &masked, 1.0, &noise, None)?.soft
    };
    let gen_params: Vec<Tensor> = t.generator.params.tensors().cloned().collect();
    let gen_err = check_gradients(
        |g, vars| {
            let gen = t.generator.bind_vars(vars.to_vec())?;
            let aug = generate_adversarial_with_noise(&gen, &masked, 1.0, &noise, Some(&anchor))?;
            let teacher = t.teacher.bind(g, false);
            let student = t.student.bind(g, false);
            let heads = t.heads.bind(g, false);
            Ok(generator_objective(&teacher, &student, &heads, &aug.hard, aug.carrier, &w)?.total)
        },
        &gen_params,
        DEFAULT_STEP,
        None,
    )?;

    let aug = sample_adversarial_ids(&t.generator, &masked, 1.0, &mut rng)?;
    let ns = t.student.params.len();
    let mut params: Vec<Tensor> = t.student.params.tensors().cloned().collect();
    params.extend(t.heads.params.tensors().cloned());
    let student_err = check_gradients(
        |g, vars| {
            let student = t.student.bind_vars(vars[..ns].to_vec())?;
            let heads = BoundHead::from_vars(vars[ns..].to_vec())?;
            let teacher = t.teacher.bind(g, false);
            Ok(student_objective(&teacher, &student, &heads, &orig, Some(&aug), &w, None)?.total)
        },
        &params,
        DEFAULT_STEP,
        None,
    )?;
    Ok(vec![("generator_objective", gen_err), ("student_objective", student_err)])
}

fn gradient_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut run = || -> Result<Vec<(&'static str, f64)>> {
        let mut all = primitive_errors(&mut rng)?;
        all.extend(loss_errors(&mut rng)?);
        all.extend(objective_errors()?);
        Ok(all)
    };
    match run() {
        Ok(all) => {
            let (worst_name, worst) =
                all.iter().cloned().fold(("", 0.0), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
            let objectives: Vec<String> =
                all.iter().rev().take(2).map(|(n, e)| format!("{n} {e:.1e}")).collect();
            Outcome::strict(
                worst < 1e-5,
                format!(
                    "{} checks, max relative error {worst:.2e} ({worst_name}); {}",
                    all.len(),
                    objectives.join(", ")
                ),
            )
        }
        Err(e) => Outcome::strict(false, format!("error: {e}")),
    }
}

// ---------------------------------------------------------------- criterion 2

/// Direct evaluation of the contrastive loss from its definition.
fn crd_brute_force(t: &[Vec<f64>], s: &[Vec<f64>], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let k = t.len();
    let mut total = 0.0;
    for a in 0..k {
        let numerator = (cos(&t[a], &s[a]) / tau).exp();
        let denominator: f64 = (0..k).map(|j| (cos(&t[a], &s[j]) / tau).exp()).sum();
        total += -(numerator / denominator).ln();
    }
    total / k as f64
}

fn unit_rows(rng: &mut ChaCha8Rng, k: usize, u: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| loop {
            let v: Vec<f64> = (0..u).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-3 {
                break v.iter().map(|x| x / n).collect();
            }
        })
        .collect()
}

fn crd_via_graph(t: &[Vec<f64>], s: &[Vec<f64>], tau: f64) -> Result<f64> {
    let g = Graph::new();
    let to = |rows: &[Vec<f64>]| {
        Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).map(|t| g.constant(t))
    };
    crd_loss(to(t)?, to(s)?, tau)?.item()
}

fn crd_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(1..=8);
        let u = rng.random_range(1..=4);
        let tau = rng.random_range(0.5..3.0);
        let (t, s) = (unit_rows(&mut rng, k, u), unit_rows(&mut rng, k, u));
        match crd_via_graph(&t, &s, tau) {
            Ok(v) => worst = worst.max((v - crd_brute_force(&t, &s, tau)).abs()),
            Err(e) => return Outcome::strict(false, format!("error: {e}")),
        }
    }
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let hand = crd_via_graph(&eye, &eye, 2.0).unwrap_or(f64::NAN);
    Outcome::strict(
        worst < 1e-9 && (hand - 0.47408).abs() < 1e-4,
        format!("100 random batches, max |diff| {worst:.1e}; K=2 hand case {hand:.5}"),
    )
}

// ---------------------------------------------------------------- criterion 3

fn kl_hand_values() -> Outcome {
    let g = Graph::new();
    let t = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
    let s = g.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
    let hand = kd_kl(t, s, 1.0, false).and_then(|v| v.item()).unwrap_or(f64::NAN);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let rows = rng.random_range(1..5);
        let cols = rng.random_range(2..7);
        let x = g.constant(uniform(&mut rng, &[rows, cols], -5.0, 5.0));
        let tau = rng.random_range(0.5..4.0);
        worst = worst.max(kd_kl(x, x, tau, false).and_then(|v| v.item()).unwrap_or(f64::NAN).abs());
    }
    Outcome::strict(
        (hand - 0.46212).abs() < 1e-4 && worst == 0.0,
        format!("KL((1,0),(0,1)) = {hand:.5}; max |KL(x,x)| over 100 draws = {worst:e}"),
    )
}

// ---------------------------------------------------------------- criterion 4

struct DeskData {
    vocab_size: usize,
    train: EncodedDataset,
    student_train: EncodedDataset,
    dev: EncodedDataset,
    ood: EncodedDataset,
}

const DESK_MAX_LEN: usize = 40;

fn desk_data() -> DeskData {
    let task = gen_synthetic(&SyntheticTaskSpec::default()).unwrap();
    let enc = |d: &cilda_core::data::Dataset| d.encode(&task.vocab, DESK_MAX_LEN).unwrap();
    DeskData {
        vocab_size: task.vocab.len(),
        train: enc(&task.train),
        student_train: enc(&task.train.subsample(1000, 0)),
        dev: enc(&task.dev),
        ood: enc(&task.ood),
    }
}

fn teacher_config(v: usize) -> EncoderConfig {
    EncoderConfig::classifier(4, 64, 4, 128, v, DESK_MAX_LEN, 2)
}

fn student_config(v: usize) -> EncoderConfig {
    EncoderConfig::classifier(2, 32, 2, 64, v, DESK_MAX_LEN, 2)
}

fn generator_config(v: usize) -> EncoderConfig {
    EncoderConfig::masked_lm(1, 32, 2, 64, v, DESK_MAX_LEN)
}

fn fixed_draw_objective(state: &TrainState, batch: &Batch, seed: u64) -> Result<f64> {
    let cfg = state.config.resolved();
    let mut masking = stream(seed, Stream::Masking);
    let mut gumbel = stream(seed, Stream::Gumbel);
    let mut total = 0.0;
    for _ in 0..4 {
        let masked = mask_tokens(batch, &cfg.mask, &mut masking);
        let g = Graph::new();
        let gen = state.generator.as_ref().expect("cilda state").bind(&g, false);
        let aug = generate_adversarial(&gen, &masked, cfg.weights.gumbel_tau, &mut gumbel)?;
        let loss = generator_objective(
            &state.teacher.bind(&g, false),
            &state.student.bind(&g, false),
            &state.heads.bind(&g, false),
            &aug.hard,
            aug.carrier,
            &cfg.weights,
        )?;
        total += loss.total.item()?;
    }
    Ok(total / 4.0)
}

fn maximization_efficacy() -> Outcome {
    let run = || -> Result<(usize, usize, Vec<String>, f64)> {
        let data = desk_data();
        let v = data.vocab_size;
        let teacher = train_teacher(
            &SupervisedConfig { epochs: 1, seed: 100, ..Default::default() },
            teacher_config(v),
            &data.train,
            &data.dev,
        )?;
        let batch = data.dev.batch(&(0..32).collect::<Vec<_>>());
        let mut increased = 0;
        let mut held_out_increased = 0;
        let mut deltas = Vec::new();
        for seed in 0..10 {
            let config = TrainConfig { seed, n_g: 20, ..Default::default() };
            let mut state = TrainState::new(
                config,
                teacher.model.clone(),
                init_student(student_config(v), seed)?,
                Some(init_generator(generator_config(v), seed)?),
            )?;
            let before = fixed_draw_objective(&state, &batch, 1000 + seed)?;
            // The generator's whole input (batch, mask, Gumbel noise) is held
            // fixed: every step and the final probe replay the same draws.
            let (masking, gumbel) = (state.masking.clone(), state.gumbel.clone());
            let mut values = Vec::new();
            for _ in 0..=20 {
                state.masking = masking.clone();
                state.gumbel = gumbel.clone();
                values.extend(state.maximization_round(&mut std::iter::once(batch.clone()), 1)?);
            }
            if values[20] > values[0] {
                increased += 1;
            }
            deltas.push(format!("{:+.3}", values[20] - values[0]));
            // The probe above took one more step; judge held-out draws on a
            // state that has taken exactly 20.
            let mut replay = TrainState::new(
                TrainConfig { seed, n_g: 20, ..Default::default() },
                teacher.model.clone(),
                init_student(student_config(v), seed)?,
                Some(init_generator(generator_config(v), seed)?),
            )?;
            for _ in 0..20 {
                replay.masking = masking.clone();
                replay.gumbel = gumbel.clone();
                replay.maximization_round(&mut std::iter::once(batch.clone()), 1)?;
            }
            if fixed_draw_objective(&replay, &batch, 1000 + seed)? > before {
                held_out_increased += 1;
            }
        }
        Ok((increased, held_out_increased, deltas, teacher.best_dev))
    };
    match run() {
        Ok((n, held_out, deltas, teacher_dev)) => Outcome::strict(
            n >= 9,
            format!(
                "L_G rose on {n}/10 seeds at the fixed draw (deltas {}); on held-out draws {held_out}/10 \
                 (reported); teacher dev {teacher_dev:.3}",
                deltas.join(" ")
            ),
        ),
        Err(e) => Outcome::strict(false, format!("error: {e}")),
    }
}

// ---------------------------------------------------------------- criterion 5

fn mode_reductions() -> Outcome {
    let run = || -> Result<(f64, f64, bool)> {
        let mut t = trio(16, 5);
        t.student.config.dropout = 0.1;
        let orig = tiny_batch(4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let masked = mask_tokens(&orig, &MaskPolicy::default(), &mut rng);
        let aug = sample_adversarial_ids(&t.generator, &masked, 1.0, &mut rng)?;

        // Direct objective: augmented terms present but weighted zero.
        let zeroed = LossWeights { lambda2_aug: 0.0, lambda3: 0.0, ..LossWeights::default() };
        let value = |aug: Option<&Batch>, w: &LossWeights| -> Result<f64> {
            let g = Graph::new();
            let mut dropout = ChaCha8Rng::seed_from_u64(8);
            let loss = student_objective(
                &t.teacher.bind(&g, false),
                &t.student.bind(&g, true),
                &t.heads.bind(&g, true),
                &orig,
                aug,
                w,
                Some(&mut dropout),
            )?;
            loss.total.item()
        };
        let direct = (value(Some(&aug), &zeroed)? - value(None, &LossWeights::default())?).abs();

        // One minimization step through the training loop in both modes.
        let step = |mode: Mode, weights: LossWeights| -> Result<f64> {
            let config = TrainConfig { mode, weights, seed: 3, ..Default::default() };
            let mut state =
                TrainState::new(config, t.teacher.clone(), t.student.clone(), Some(t.generator.clone()))?;
            let steps = state.minimization_round(&mut std::iter::once(orig.clone()), 1, None)?;
            Ok(steps[0].total)
        };
        let looped = (step(Mode::Cilda, zeroed.clone())? - step(Mode::VanillaKd, LossWeights::default())?).abs();

        // Generator gradient with alpha2 = 0 against kd_kl alone.
        let masked = mask_tokens(&orig, &MaskPolicy::with_p(0.5)?, &mut rng);
        let noise = gumbel_noise(&[orig.ids.len(), t.generator.config.vocab_size], &mut rng);
        let no_crd = LossWeights { alpha2: 0.0, ..LossWeights::default() };
        let grads = |use_objective: bool| -> Result<Vec<u8>> {
            let g = Graph::new();
            let gen = t.generator.bind(&g, true);
            let aug = generate_adversarial_with_noise(&gen, &masked, 1.0, &noise, None)?;
            let teacher = t.teacher.bind(&g, false);
            let student = t.student.bind(&g, false);
            let out = if use_objective {
                generator_objective(&teacher, &student, &t.heads.bind(&g, false), &aug.hard, aug.carrier, &no_crd)?.total
            } else {
                let (tl, _) = teacher.classify(&aug.hard, Some(aug.carrier), None)?;
                let (sl, _) = student.classify(&aug.hard, Some(aug.carrier), None)?;
                kd_kl(tl, sl, no_crd.tau1, false)?.scale(no_crd.alpha1)
            };
            g.backward(out)?;
            Ok(gen.grads(&g).iter().flat_map(|t| t.to_le_bytes()).collect())
        };
        let identical = grads(true)? == grads(false)?;
        Ok((direct, looped, identical))
    };
    match run() {
        Ok((direct, looped, identical)) => Outcome::strict(
            direct <= 1e-12 && looped <= 1e-12 && identical,
            format!(
                "|cilda(l2'=l3=0) - vanilla| = {direct:e} (objective), {looped:e} (training step); \
                 alpha2=0 generator gradient byte-identical to kd_kl: {identical}"
            ),
        ),
        Err(e) => Outcome::strict(false, format!("error: {e}")),
    }
}

// ------------------------------------------------------------ criteria 6 to 8

const DESK_SEEDS: [u64; 3] = [0, 1, 2];
const DESK_MODES: [Mode; 3] = [Mode::NoKd, Mode::VanillaKd, Mode::Cilda];

struct StudentRun {
    mode: Mode,
    dev_accuracy: f64,
    divergence: f64,
    ood_accuracy: f64,
}

struct DeskRuns {
    teacher_dev: Vec<f64>,
    students: Vec<StudentRun>,
}

impl DeskRuns {
    fn mean(&self, mode: Mode, f: impl Fn(&StudentRun) -> f64) -> f64 {
        let vals: Vec<f64> = self.students.iter().filter(|s| s.mode == mode).map(f).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

fn desk_runs() -> &'static std::result::Result<DeskRuns, String> {
    static RUNS: std::sync::OnceLock<std::result::Result<DeskRuns, String>> = std::sync::OnceLock::new();
    RUNS.get_or_init(|| run_desk().map_err(|e| e.to_string()))
}

fn run_desk() -> Result<DeskRuns> {
    let data = desk_data();
    let v = data.vocab_size;
    let mut runs = DeskRuns { teacher_dev: Vec::new(), students: Vec::new() };
    for seed in DESK_SEEDS {
        let teacher = train_teacher(
            &SupervisedConfig { epochs: 2, patience: 1, seed, ..Default::default() },
            teacher_config(v),
            &data.train,
            &data.dev,
        )?;
        runs.teacher_dev.push(teacher.best_dev);
        let mut generator = init_generator(generator_config(v), seed)?;
        warmup_generator_mlm(&mut generator, &WarmupConfig { steps: 100, seed, ..Default::default() }, &data.train)?;
        for mode in DESK_MODES {
            let config = TrainConfig { mode, seed, epochs: 15, ..Default::default() };
            let student = init_student(student_config(v), seed)?;
            let mut state = TrainState::new(config, teacher.model.clone(), student, Some(generator.clone()))?;
            train_cilda(&mut state, &data.student_train, &data.dev, None)?;
            let best = &state.best_student;
            runs.students.push(StudentRun {
                mode,
                dev_accuracy: evaluate(best, &data.dev)?.accuracy,
                divergence: logit_divergence(&teacher.model, best, &data.dev, 1.0)?.mean,
                ood_accuracy: evaluate(best, &data.ood)?.accuracy,
            });
        }
    }
    Ok(runs)
}

fn desk_accuracy() -> Outcome {
    let runs = match desk_runs() {
        Ok(r) => r,
        Err(e) => return Outcome::strict(false, format!("error: {e}")),
    };
    let teacher_ok = runs.teacher_dev.iter().all(|&a| a >= 0.97);
    let acc = |m| runs.mean(m, |s| s.dev_accuracy);
    let (none, vanilla, cilda) = (acc(Mode::NoKd), acc(Mode::VanillaKd), acc(Mode::Cilda));
    let ordered = none <= vanilla && vanilla <= cilda;
    let margin = cilda >= vanilla + 0.005;
    let teachers: Vec<String> = runs.teacher_dev.iter().map(|a| format!("{a:.3}")).collect();
    Outcome {
        pass: teacher_ok && ordered && margin,
        enforced_ok: teacher_ok,
        detail: format!(
            "teacher dev [{}]; mean student dev no_kd {none:.4} vanilla_kd {vanilla:.4} cilda {cilda:.4}; \
             ordering {}, +0.5pt margin {} (directional, reported)",
            teachers.join(" "),
            if ordered { "holds" } else { "violated" },
            if margin { "holds" } else { "missed" },
        ),
    }
}

fn desk_divergence() -> Outcome {
    let runs = match desk_runs() {
        Ok(r) => r,
        Err(e) => return Outcome::strict(false, format!("error: {e}")),
    };
    let (vanilla, cilda) =
        (runs.mean(Mode::VanillaKd, |s| s.divergence), runs.mean(Mode::Cilda, |s| s.divergence));
    Outcome {
        pass: cilda <= vanilla,
        enforced_ok: true,
        detail: format!("mean dev KL(teacher||student) vanilla_kd {vanilla:.4} cilda {cilda:.4} (directional, reported)"),
    }
}

fn desk_ood() -> Outcome {
    let runs = match desk_runs() {
        Ok(r) => r,
        Err(e) => return Outcome::strict(false, format!("error: {e}")),
    };
    let (vanilla, cilda) =
        (runs.mean(Mode::VanillaKd, |s| s.ood_accuracy), runs.mean(Mode::Cilda, |s| s.ood_accuracy));
    Outcome {
        pass: cilda >= vanilla,
        enforced_ok: true,
        detail: format!("mean OOD accuracy (length 2L) vanilla_kd {vanilla:.4} cilda {cilda:.4} (directional, reported)"),
    }
}

// ---------------------------------------------------------------- criterion 9

fn tiny_state(seed: u64) -> Result<(TrainState, EncodedDataset, EncodedDataset)> {
    let task = tiny_task(1);
    let train = task.train.encode(&task.vocab, TINY_MAX_LEN)?;
    let dev = task.dev.encode(&task.vocab, TINY_MAX_LEN)?;
    let t = trio(16, 9);
    let config = TrainConfig { seed, epochs: 2, n_g: 2, n_s: 3, batch_size: 16, projection_dim: 8, ..Default::default() };
    let state = TrainState::new(config, t.teacher, init_student(t.student.config.clone(), seed)?, Some(t.generator))?;
    Ok((state, train, dev))
}

fn determinism() -> Outcome {
    let run = || -> Result<String> {
        let stream_bytes = || -> Result<(Vec<u8>, TrainState)> {
            let (mut state, train, dev) = tiny_state(4)?;
            let mut buf = Vec::new();
            train_cilda(&mut state, &train, &dev, Some(&mut buf))?;
            Ok((buf, state))
        };
        let (a, state) = stream_bytes()?;
        let (b, _) = stream_bytes()?;
        if a != b || a.is_empty() {
            return Err(Error::Data("metrics streams differ".into()));
        }
        let bytes = state.to_checkpoint()?.to_bytes()?;
        let reloaded = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?;
        let again = reloaded.to_checkpoint()?.to_bytes()?;
        if again != bytes {
            return Err(Error::Data("checkpoint round trip changed bytes".into()));
        }
        let mut corrupt = bytes.clone();
        let n = corrupt.len();
        corrupt[n - 20] ^= 0x01;
        let rejected = matches!(Checkpoint::from_bytes(&corrupt), Err(Error::Checksum { .. }));
        if !rejected {
            return Err(Error::Data("corrupted checkpoint was not rejected by checksum".into()));
        }
        Ok(format!(
            "{} metric lines identical across runs; {}-byte checkpoint round-trips exactly; corruption rejected",
            a.iter().filter(|&&c| c == b'\n').count(),
            bytes.len()
        ))
    };
    match run() {
        Ok(detail) => Outcome::strict(true, detail),
        Err(e) => Outcome::strict(false, format!("error: {e}")),
    }
}

// --------------------------------------------------------------- criterion 10

fn augmentation_contracts() -> Outcome {
    let run = || -> Result<String> {
        let task = tiny_task(2);
        let data = task.train.encode(&task.vocab, TINY_MAX_LEN)?;
        let t = trio(16, 13);
        let policy = MaskPolicy::default();
        let (mut eligible, mut masked_count) = (0usize, 0usize);
        let mut worst_row_sum = 0.0f64;
        for b in 0..1000u64 {
            let mut rng = substream(10, Stream::Masking, b);
            let rows: Vec<usize> = (0..8).map(|_| rng.random_range(0..data.len())).collect();
            let batch = data.batch(&rows);
            let masked = mask_tokens(&batch, &policy, &mut rng);
            let g = Graph::new();
            let aug = generate_adversarial(&t.generator.bind(&g, false), &masked, 1.0, &mut rng)?;
            for (pos, (&x, &x_aug)) in batch.ids.iter().zip(&aug.hard.ids).enumerate() {
                if x != x_aug && !masked.mask_positions[pos] {
                    return Err(Error::Data(format!("batch {b}: X' differs from X off-mask at {pos}")));
                }
                if ![PAD, CLS, SEP].contains(&x) && eligible < 10_000 {
                    eligible += 1;
                    masked_count += usize::from(masked.mask_positions[pos]);
                }
            }
            let v = t.generator.config.vocab_size;
            let carrier = aug.carrier.value();
            for r in 0..batch.ids.len() {
                let soft_sum: f64 = aug.soft.row(r).iter().sum();
                worst_row_sum = worst_row_sum.max((soft_sum - 1.0).abs());
                let hard = &carrier.data()[r * v..(r + 1) * v];
                let ones = hard.iter().filter(|&&x| x == 1.0).count();
                let zeros = hard.iter().filter(|&&x| x == 0.0).count();
                if ones != 1 || zeros != v - 1 {
                    return Err(Error::Data(format!("batch {b}: row {r} is not an exact one-hot")));
                }
            }
        }
        let rate = masked_count as f64 / eligible as f64;
        if eligible < 10_000 || (rate - 0.3).abs() > 0.02 || worst_row_sum > 1e-9 {
            return Err(Error::Data(format!(
                "mask rate {rate:.4} over {eligible} positions, soft row-sum error {worst_row_sum:e}"
            )));
        }
        Ok(format!(
            "1000 batches: X' = X off-mask; mask rate {rate:.4} over 10000 positions; \
             soft rows sum to 1 within {worst_row_sum:.1e}; hard rows exact one-hot"
        ))
    };
    match run() {
        Ok(detail) => Outcome::strict(true, detail),
        Err(e) => Outcome::strict(false, format!("error: {e}")),
    }
}
