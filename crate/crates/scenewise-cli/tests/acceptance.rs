//! Release acceptance suite. Each test exercises one acceptance criterion
//! end to end and prints a single summary line with its measured numbers.
//!
//! Formula checks compare the shipped implementations against brute-force
//! reimplementations written here from the definitions, so a regression in
//! either path surfaces as a disagreement. The heavy tests (full-width
//! gradient check, the end-to-end training run, the distillation ablation,
//! and the byte-level reproducibility run) serialize on a shared lock so
//! their printed wall times reflect compute rather than interleaving.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use scenewise_data::curate::{
    cluster_objects, mutual_reachability, ClusterConfig, NgramEmbedder, TextEmbedder,
};
use scenewise_data::kernels::{gaussian_blur, rbf_mask};
use scenewise_data::{
    builtin_antonyms, generate_negative_triplets, generate_scene, render_dataset,
    triplet_caption, BoundingBox, RelationAnnotation, SceneConfig, SceneObject, SceneRecord,
    Split, Triplet,
};
use scenewise_model::checkpoint::load_checkpoint;
use scenewise_model::ema::{ema_update, EMAState};
use scenewise_model::eval::{
    binary_dice_iou, linear_probe, zero_shot_retrieval, MetricsReport, PromptTemplateSet,
};
use scenewise_model::nn::GradStore;
use scenewise_model::objectives::{
    batch_loss_nodes, ca_loss, contrastive_loss, kd_loss, kl_embedding_divergence, kl_term,
    total_loss, LevelTemps, TempNodes,
};
use scenewise_model::optim::{lambda_kd, lr_at_step, LambdaSchedule};
use scenewise_model::tape::Tape;
use scenewise_model::train::{train, TrainConfig};
use scenewise_model::{EmbeddingSet, EncoderConfig, Level, ScenarioModel, TokenVocab, Tower};

/// Serializes the expensive tests so wall-time figures are meaningful on a
/// single core and the shared pipeline artifacts build exactly once.
fn heavy_lock() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn random_unit_vectors(rng: &mut ChaCha20Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Criterion: formula oracles.
// ---------------------------------------------------------------------------

/// Direct double-loop evaluation of the radial basis mask definition.
fn oracle_rbf(center: (f64, f64), sigma: f64, shape: (usize, usize)) -> Array2<f64> {
    let (h, w) = shape;
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - center.0;
            let dy = y as f64 - center.1;
            out[[y, x]] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    out
}

/// Mirror-without-repeat index fold (abcd|dcba) written as a loop.
fn reflect_index(mut i: i64, n: i64) -> usize {
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Brute-force 2D blur: truncated renormalized Gaussian taps applied as a
/// full double sum per pixel with reflected borders.
fn oracle_blur(image: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma == 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps = Vec::with_capacity((2 * radius + 1) as usize);
    for k in -radius..=radius {
        taps.push((-(k as f64 * k as f64) / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= total;
    }
    let (h, w, c) = image.dim();
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let sy = reflect_index(y + dy, h as i64);
                        let sx = reflect_index(x + dx, w as i64);
                        acc += taps[(dy + radius) as usize]
                            * taps[(dx + radius) as usize]
                            * image[[sy, sx, ch]];
                    }
                }
                out[[y as usize, x as usize, ch]] = acc;
            }
        }
    }
    out
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// KL of temperature-softened softmaxes times tau squared, from scratch.
fn oracle_kl(teacher: &[f64], student: &[f64], tau: f64) -> f64 {
    let p = softmax(&teacher.iter().map(|x| x / tau).collect::<Vec<_>>());
    let q = softmax(&student.iter().map(|x| x / tau).collect::<Vec<_>>());
    let kl: f64 = p
        .iter()
        .zip(&q)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum();
    tau * tau * kl
}

/// Symmetric batch InfoNCE over row-normalized embeddings, from scratch.
fn oracle_contrastive(img: &Array2<f64>, txt: &Array2<f64>, temp: f64) -> f64 {
    let normalize = |m: &Array2<f64>| {
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            let norm = row.dot(&row).sqrt().max(1e-12);
            row /= norm;
        }
        out
    };
    let a = normalize(img);
    let b = normalize(txt);
    let n = a.nrows();
    let mut sims = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            sims[[i, j]] = a.row(i).dot(&b.row(j)) / temp;
        }
    }
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| sims[[i, j]]).collect();
        i2t += softmax(&row)[i].ln();
        let col: Vec<f64> = (0..n).map(|j| sims[[j, i]]).collect();
        t2i += softmax(&col)[i].ln();
    }
    -0.5 * (i2t / n as f64 + t2i / n as f64)
}

/// Piecewise cosine-eased distillation weight, written from the definition.
fn oracle_lambda(p: f64, start: f64, mid: f64, end: f64, p1: f64, p2: f64) -> f64 {
    if p <= p1 {
        start
    } else if p <= p2 {
        let t = (p - p1) / (p2 - p1);
        mid + (start - mid) / 2.0 * (1.0 + (std::f64::consts::PI * t).cos())
    } else {
        let t = (p - p2) / (1.0 - p2);
        end + (mid - end) / 2.0 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Linear warmup from a floored fraction of the base rate into a cosine
/// decay that ends at zero on the last step.
fn oracle_lr(step: usize, total: usize, base: f64, warmup_fraction: f64) -> f64 {
    let warmup = (warmup_fraction * total as f64).floor() as usize;
    if step < warmup {
        let t = step as f64 / warmup as f64;
        return base * (1e-3 + (1.0 - 1e-3) * t);
    }
    let span = (total - 1).saturating_sub(warmup).max(1);
    let t = (step - warmup) as f64 / span as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

fn oracle_cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na * nb)).max(0.0)
}

/// Naive mutual reachability: full sorted distance lists for the core
/// distances, then the max of both cores and the direct distance.
fn oracle_mutual_reachability(a: usize, b: usize, k: usize, points: &[Vec<f64>]) -> f64 {
    let core = |p: usize| {
        let mut d: Vec<f64> = (0..points.len())
            .filter(|&q| q != p)
            .map(|q| oracle_cosine_distance(&points[p], &points[q]))
            .collect();
        d.sort_by(|x, y| x.partial_cmp(y).unwrap());
        d[k - 1]
    };
    core(a)
        .max(core(b))
        .max(oracle_cosine_distance(&points[a], &points[b]))
}

#[test]
fn formula_oracles_agree_with_brute_force() {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(41);
    let mut checks = 0usize;

    // Radial basis masks: varied sigmas, off-grid and out-of-frame centers,
    // non-square shapes.
    let rbf_fixtures = [
        ((3.0, 3.0), 1.0, (7, 7)),
        ((3.25, 7.75), 2.5, (12, 9)),
        ((0.0, 0.0), 0.5, (5, 8)),
        ((-2.0, 10.5), 4.0, (9, 9)),
        ((31.5, 16.0), 6.5, (33, 48)),
    ];
    for &(center, sigma, shape) in &rbf_fixtures {
        let got = rbf_mask(center, sigma, shape).unwrap();
        let want = oracle_rbf(center, sigma, shape);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!(rel_diff(*g, *w) <= 1e-9, "rbf mismatch: {g} vs {w}");
        }
        checks += 1;
    }

    // Gaussian blur: random images, several sigmas, identity at zero.
    let blur_fixtures = [(0.6, 7, 5, 3), (1.0, 8, 8, 3), (2.0, 9, 6, 1), (1.5, 5, 11, 3), (0.0, 6, 6, 3)];
    for &(sigma, h, w, c) in &blur_fixtures {
        let image = Array3::from_shape_fn((h, w, c), |_| rng.gen_range(0.0..1.0));
        let got = gaussian_blur(&image, sigma).unwrap();
        let want = oracle_blur(&image, sigma);
        for (g, v) in got.iter().zip(want.iter()) {
            assert!(rel_diff(*g, *v) <= 1e-6, "blur mismatch: {g} vs {v}");
        }
        checks += 1;
    }

    // Softened KL divergence: random vectors, several taus, zero at equality.
    for &(d, tau) in &[(3usize, 0.5), (8, 1.0), (16, 2.0), (8, 5.0), (4, 1.0)] {
        let t = Array1::from_shape_fn(d, |_| rng.gen_range(-2.0..2.0));
        let s = Array1::from_shape_fn(d, |_| rng.gen_range(-2.0..2.0));
        let got = kl_embedding_divergence(&t, &s, tau).unwrap();
        let want = oracle_kl(t.as_slice().unwrap(), s.as_slice().unwrap(), tau);
        assert!(rel_diff(got, want) <= 1e-9, "kl mismatch: {got} vs {want}");
        let zero = kl_embedding_divergence(&t, &t, tau).unwrap();
        assert!(zero.abs() <= 1e-12, "kl of identical vectors is {zero}");
        checks += 1;
    }

    // Symmetric contrastive loss: varied batch shapes and temperatures.
    for &(b, d, temp) in &[(2usize, 4usize, 0.07), (3, 8, 0.5), (5, 16, 1.0), (4, 4, 0.05), (6, 8, 0.2)] {
        let img = Array2::from_shape_fn((b, d), |_| rng.gen_range(-1.0..1.0));
        let txt = Array2::from_shape_fn((b, d), |_| rng.gen_range(-1.0..1.0));
        let got = contrastive_loss(&img, &txt, temp).unwrap();
        let want = oracle_contrastive(&img, &txt, temp);
        assert!(rel_diff(got, want) <= 1e-9, "contrastive mismatch: {got} vs {want}");
        checks += 1;
    }

    // Distillation weight schedule: fixed plus two anneal shapes across the
    // progress axis.
    let schedules = [
        (LambdaSchedule::fixed(0.7), (0.7, 0.7, 0.7, 0.4, 0.7)),
        (LambdaSchedule::anneal(1.0, 0.0), (1.0, 0.5, 0.0, 0.4, 0.7)),
        (LambdaSchedule::anneal(10.0, 0.0), (10.0, 1.0, 0.0, 0.4, 0.7)),
        (
            LambdaSchedule::Anneal { start: 2.0, mid: 0.8, end: 0.1, p1: 0.3, p2: 0.6 },
            (2.0, 0.8, 0.1, 0.3, 0.6),
        ),
        (LambdaSchedule::anneal(4.0, 2.0), (4.0, 2.0, 2.0, 0.4, 0.7)),
    ];
    for (sched, (start, mid, end, p1, p2)) in &schedules {
        for i in 0..=20 {
            let p = i as f64 / 20.0;
            let got = lambda_kd(p, sched).unwrap();
            let want = oracle_lambda(p, *start, *mid, *end, *p1, *p2);
            assert!(rel_diff(got, want) <= 1e-9, "lambda mismatch at {p}: {got} vs {want}");
        }
        checks += 1;
    }

    // Learning rate schedule: several run lengths and warmup fractions,
    // every step checked for the short runs.
    for &(total, wf, base) in &[
        (100usize, 0.1, 2e-5),
        (7, 0.3, 1e-3),
        (40, 0.0, 0.5),
        (13, 0.5, 3e-4),
        (1500, 0.1, 1e-3),
    ] {
        let stride = (total / 50).max(1);
        for step in (0..total).step_by(stride) {
            let got = lr_at_step(step, total, base, wf).unwrap();
            let want = oracle_lr(step, total, base, wf);
            assert!(rel_diff(got, want) <= 1e-9, "lr mismatch at {step}/{total}: {got} vs {want}");
        }
        checks += 1;
    }

    // Mutual reachability: random unit vectors, several neighborhood sizes,
    // plus a duplicate-point fixture.
    for &(n, k) in &[(5usize, 1usize), (5, 2), (6, 3), (8, 2), (9, 4)] {
        let points = random_unit_vectors(&mut rng, n, 6);
        for a in 0..n {
            for b in 0..n {
                let got = mutual_reachability(a, b, k, &points).unwrap();
                let want = oracle_mutual_reachability(a, b, k, &points);
                assert!(rel_diff(got, want) <= 1e-9, "reachability mismatch: {got} vs {want}");
            }
        }
        checks += 1;
    }
    let mut dup = random_unit_vectors(&mut rng, 4, 6);
    dup.push(dup[0].clone());
    let got = mutual_reachability(0, 4, 1, &dup).unwrap();
    assert!(rel_diff(got, oracle_mutual_reachability(0, 4, 1, &dup)) <= 1e-9);
    checks += 1;

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "oracle suite took {elapsed:?}");
    println!(
        "PASS formula oracles: {checks} fixture groups agree within 1e-9 (blur 1e-6) in {:.2}s",
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// Shared synthetic records for the gradient, distillation, and shape tests.
// ---------------------------------------------------------------------------

const NAME_POOL: [&str; 6] = ["alpha", "beta", "gamma", "delta", "epsilon", "omega"];
const PRED_POOL: [&str; 4] = ["near", "far", "above", "below"];
const ACTION_POOL_FIXTURE: [&str; 4] = ["lift", "stack", "slide", "shift"];

fn fixture_vocab() -> TokenVocab {
    let mut phrases: Vec<&str> = Vec::new();
    phrases.extend(NAME_POOL);
    phrases.extend(PRED_POOL);
    phrases.extend(ACTION_POOL_FIXTURE);
    TokenVocab::from_phrases(phrases)
}

fn random_image(rng: &mut ChaCha20Rng, size: usize) -> Array3<f64> {
    Array3::from_shape_fn((size, size, 3), |_| rng.gen_range(0.0..1.0))
}

/// A synthetic scene with the requested object and relation counts. Every
/// relation carries exactly three negatives: swapped arguments, a swapped
/// predicate, and a substituted object.
fn make_record(rng: &mut ChaCha20Rng, size: usize, n_o: usize, n_r: usize) -> SceneRecord {
    assert!(n_o >= 2 && n_o <= NAME_POOL.len());
    let objects: Vec<SceneObject> = (0..n_o)
        .map(|i| {
            let x0 = rng.gen_range(0..size as u32 / 2);
            let y0 = rng.gen_range(0..size as u32 / 2);
            let x1 = rng.gen_range(x0 + 2..=size as u32);
            let y1 = rng.gen_range(y0 + 2..=size as u32);
            SceneObject { name: NAME_POOL[i].to_string(), bbox: BoundingBox::new(x0, y0, x1, y1) }
        })
        .collect();
    let center = |b: &BoundingBox| {
        ((b.x_min + b.x_max) as f64 / 2.0, (b.y_min + b.y_max) as f64 / 2.0)
    };
    let relations: Vec<RelationAnnotation> = (0..n_r)
        .map(|_| {
            let s = rng.gen_range(0..n_o);
            let mut o = rng.gen_range(0..n_o);
            while o == s {
                o = rng.gen_range(0..n_o);
            }
            let p = PRED_POOL[rng.gen_range(0..PRED_POOL.len())];
            let other = NAME_POOL[(o + 1) % NAME_POOL.len()];
            let alt = PRED_POOL[(PRED_POOL.iter().position(|&q| q == p).unwrap() + 1) % 4];
            let triplet: Triplet =
                (objects[s].name.clone(), p.to_string(), objects[o].name.clone());
            RelationAnnotation {
                triplet: triplet.clone(),
                object_indices: (s, o),
                centers: (center(&objects[s].bbox), center(&objects[o].bbox)),
                focused_region: random_image(rng, size),
                negatives: vec![
                    (triplet.2.clone(), triplet.1.clone(), triplet.0.clone()),
                    (triplet.0.clone(), alt.to_string(), triplet.2.clone()),
                    (triplet.0.clone(), triplet.1.clone(), other.to_string()),
                ],
            }
        })
        .collect();
    SceneRecord {
        image: random_image(rng, size),
        action: ACTION_POOL_FIXTURE[rng.gen_range(0..ACTION_POOL_FIXTURE.len())].to_string(),
        objects,
        relations,
    }
}

/// Per-relation negative caption embeddings in batch order, as the value
/// level loss expects them.
fn embed_negatives(model: &ScenarioModel, records: &[SceneRecord]) -> Vec<Array2<f64>> {
    let mut out = Vec::new();
    for record in records {
        for rel in &record.relations {
            let mut stack = Array2::zeros((rel.negatives.len(), model.config.embed_dim));
            for (i, neg) in rel.negatives.iter().enumerate() {
                stack
                    .row_mut(i)
                    .assign(&model.embed_text(Tower::TextRelation, &triplet_caption(neg)));
            }
            out.push(stack);
        }
    }
    out
}

fn level_temps(model: &ScenarioModel) -> LevelTemps {
    LevelTemps {
        global: model.temperature(Level::Global),
        object: model.temperature(Level::Object),
        relation: model.temperature(Level::Relation),
    }
}

// ---------------------------------------------------------------------------
// Criterion: full-width gradient check.
// ---------------------------------------------------------------------------

fn loss_value_for(
    model: &ScenarioModel,
    records: &[SceneRecord],
    teachers: &[EmbeddingSet],
    lambda_kdedge: f64,
) -> f64 {
    let students: Vec<EmbeddingSet> =
        records.iter().map(|r| model.forward_scene(r).unwrap()).collect();
    let negatives = embed_negatives(model, records);
    total_loss(
        &students,
        teachers,
        &negatives,
        lambda_kdedge,
        1.0,
        &level_temps(model),
        model.tau(),
    )
    .unwrap()
    .l_total
}

#[test]
fn full_width_gradients_match_finite_differences() {
    let _guard = heavy_lock();
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(4242);
    let records = vec![make_record(&mut rng, 16, 2, 1), make_record(&mut rng, 16, 3, 2)];

    let config = EncoderConfig { embed_dim: 64, patch_size: 8, depth: 2, heads: 4, max_tokens: 6 };
    let mut model = ScenarioModel::new(config.clone(), 16, fixture_vocab(), 11).unwrap();
    let teacher_model = ScenarioModel::new(config, 16, fixture_vocab(), 12).unwrap();
    let teachers: Vec<EmbeddingSet> =
        records.iter().map(|r| teacher_model.forward_scene(r).unwrap()).collect();
    let lambda = 0.7;

    let mut tape = Tape::new();
    let binding = model.params.bind(&mut tape, true);
    let temps = TempNodes {
        global: binding.id("temp.global"),
        object: binding.id("temp.object"),
        relation: binding.id("temp.relation"),
        tau_log: binding.id("tau.log"),
    };
    let scenes: Vec<_> = records
        .iter()
        .map(|r| model.scene_nodes(&mut tape, &binding, r, true).unwrap())
        .collect();
    let loss = batch_loss_nodes(&mut tape, &scenes, &teachers, &temps, lambda, 1.0).unwrap();
    let base = tape.value(loss.total)[[0, 0]];
    tape.backward(loss.total);
    let mut grads = GradStore::new();
    binding.collect_grads(&tape, &mut grads);

    let recomputed = loss_value_for(&model, &records, &teachers, lambda);
    assert!(
        (base - recomputed).abs() <= 1e-10 * base.abs().max(1.0),
        "forward paths disagree: {base} vs {recomputed}"
    );

    // Three random parameters from each of the six towers, plus one
    // contrastive temperature and the distillation temperature: 20 samples.
    let all_names: Vec<String> = model.params.names().map(str::to_string).collect();
    let mut samples: Vec<(String, usize, usize)> = Vec::new();
    for prefix in ["v_g.", "v_o.", "v_r.", "t_g.", "t_o.", "t_r."] {
        let tower: Vec<&String> = all_names.iter().filter(|n| n.starts_with(prefix)).collect();
        assert!(!tower.is_empty(), "no parameters under {prefix}");
        let mut chosen = BTreeSet::new();
        while chosen.len() < 3 {
            let name = tower[rng.gen_range(0..tower.len())].clone();
            let dim = model.params.get(&name).dim();
            let pick = (name.clone(), rng.gen_range(0..dim.0), rng.gen_range(0..dim.1));
            chosen.insert(pick);
        }
        samples.extend(chosen);
    }
    samples.push(("temp.global".to_string(), 0, 0));
    samples.push(("tau.log".to_string(), 0, 0));
    assert_eq!(samples.len(), 20);

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, r, c) in &samples {
        let analytic = grads.get(name).map(|g| g[[*r, *c]]).unwrap_or(0.0);
        let original = model.params.get(name)[[*r, *c]];
        model.params.get_mut(name)[[*r, *c]] = original + h;
        let plus = loss_value_for(&model, &records, &teachers, lambda);
        model.params.get_mut(name)[[*r, *c]] = original - h;
        let minus = loss_value_for(&model, &records, &teachers, lambda);
        model.params.get_mut(name)[[*r, *c]] = original;
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        worst = worst.max(rel);
        assert!(
            rel <= 1e-4,
            "gradient mismatch for {name}[{r},{c}]: analytic {analytic}, numeric {numeric}, rel {rel}"
        );
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "gradient check took {elapsed:?}");
    println!(
        "PASS gradient check: 20 sampled parameters across six towers at width 64, worst rel {worst:.2e} in {:.1}s",
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// Criterion: distillation weight schedule shape.
// ---------------------------------------------------------------------------

#[test]
fn distillation_weight_plateau_continuity_and_endpoint() {
    let sched = LambdaSchedule::anneal(1.0, 0.0);
    for i in 0..=40 {
        let p = i as f64 * 0.01;
        assert_eq!(lambda_kd(p, &sched).unwrap(), 1.0, "plateau broken at {p}");
    }
    let eps = 1e-9;
    for bp in [0.4, 0.7] {
        let left = lambda_kd(bp - eps, &sched).unwrap();
        let right = lambda_kd(bp + eps, &sched).unwrap();
        assert!(
            (left - right).abs() <= 1e-12,
            "discontinuity at {bp}: {left} vs {right}"
        );
    }
    assert_eq!(lambda_kd(1.0, &sched).unwrap(), 0.0);
    let mid = lambda_kd(0.7, &sched).unwrap();
    assert!((mid - 0.5).abs() <= 1e-12, "mid plateau is {mid}");
    println!(
        "PASS distillation schedule: plateau exactly 1 through 0.4, breakpoint jumps <= 1e-12, endpoint exactly 0"
    );
}

// ---------------------------------------------------------------------------
// Criterion: EMA warmup and blend arithmetic.
// ---------------------------------------------------------------------------

#[test]
fn ema_teacher_copies_through_warmup_then_blends() {
    let mut rng = ChaCha20Rng::seed_from_u64(5150);
    let mut student = scenewise_model::nn::ParamStore::new();
    student.insert("w.a", Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0)));
    student.insert("w.b", Array2::from_shape_fn((2, 2), |_| rng.gen_range(-1.0..1.0)));

    let decay = 0.9995;
    let mut ema = EMAState::new(&student, decay, 2000).unwrap();
    let bitwise_equal = |a: &scenewise_model::nn::ParamStore,
                         b: &scenewise_model::nn::ParamStore| {
        a.names().all(|n| {
            a.get(n)
                .iter()
                .zip(b.get(n).iter())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        })
    };

    // Every pre-warmup step replaces the teacher with an exact copy.
    for step in [0usize, 1, 777, 1999] {
        for name in ["w.a", "w.b"] {
            student.get_mut(name).mapv_inplace(|x| x + 0.013);
        }
        ema_update(&mut ema, &student, step).unwrap();
        assert!(bitwise_equal(&ema.teacher, &student), "warmup copy differs at step {step}");
        assert_eq!(ema.step, step + 1);
    }

    // The first post-warmup step is the exact convex blend.
    let frozen = ema.teacher.clone();
    for name in ["w.a", "w.b"] {
        student.get_mut(name).mapv_inplace(|x| x - 0.171);
    }
    ema_update(&mut ema, &student, 2000).unwrap();
    for name in ["w.a", "w.b"] {
        let blended = ema.teacher.get(name);
        let expect = frozen.get(name) * decay + student.get(name) * (1.0 - decay);
        for (g, w) in blended.iter().zip(expect.iter()) {
            assert!((g - w).abs() <= 1e-12, "blend off for {name}: {g} vs {w}");
        }
    }
    println!(
        "PASS EMA teacher: bitwise copies for steps < 2000, first blend matches 0.9995/0.0005 within 1e-12"
    );
}

// ---------------------------------------------------------------------------
// Criterion: distillation term structure and teacher isolation.
// ---------------------------------------------------------------------------

fn random_set(rng: &mut ChaCha20Rng, d: usize, n_o: usize, n_r: usize) -> EmbeddingSet {
    let mut gen1 = |n: usize| Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
    let v_g = gen1(d);
    let t_g = gen1(d);
    let mut gen2 = |n: usize| Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
    EmbeddingSet {
        v_g,
        v_o: gen2(n_o),
        v_r: gen2(n_r),
        t_g,
        t_o: gen2(n_o),
        t_r: gen2(n_r),
        n_o,
        n_r,
    }
}

#[test]
fn distillation_term_count_sign_and_teacher_isolation() {
    let mut rng = ChaCha20Rng::seed_from_u64(90210);
    let d = 16;
    let (n_o, n_r) = (3usize, 2usize);
    let tau = 2.0;
    let student = random_set(&mut rng, d, n_o, n_r);
    let teacher = random_set(&mut rng, d, n_o, n_r);

    // Reassemble the loss from individual divergences in the documented
    // order; the sum must match bit for bit and every term is nonnegative.
    let mut terms = Vec::new();
    for i in 0..n_o {
        terms.push(kl_embedding_divergence(&teacher.v_g, &student.v_o.row(i).to_owned(), tau).unwrap());
    }
    for j in 0..n_r {
        terms.push(kl_embedding_divergence(&teacher.v_g, &student.v_r.row(j).to_owned(), tau).unwrap());
    }
    for i in 0..n_o {
        terms.push(kl_embedding_divergence(&teacher.t_o.row(i).to_owned(), &student.t_g, tau).unwrap());
    }
    for j in 0..n_r {
        terms.push(kl_embedding_divergence(&teacher.t_r.row(j).to_owned(), &student.t_g, tau).unwrap());
    }
    assert_eq!(terms.len(), 2 * (n_o + n_r));
    for (i, term) in terms.iter().enumerate() {
        assert!(*term >= 0.0, "divergence term {i} is negative: {term}");
    }
    let total = kd_loss(&student, &teacher, tau).unwrap();
    let manual: f64 = terms.iter().sum();
    assert_eq!(total, manual, "distillation loss disagrees with its term sum");

    // Teacher isolation on a micro tape: the student leaf receives a
    // gradient, the teacher constant does not.
    let mut tape = Tape::new();
    let teacher_node = tape.constant(Array2::from_shape_fn((1, d), |_| rng.gen_range(-1.0..1.0)));
    let student_node =
        tape.leaf(Array2::from_shape_fn((1, d), |_| rng.gen_range(-1.0..1.0)), true);
    let inv = tape.constant(Array2::from_elem((1, 1), 1.0 / tau));
    let tau_sq = tape.constant(Array2::from_elem((1, 1), tau * tau));
    let kl = kl_term(&mut tape, teacher_node, student_node, inv, tau_sq);
    tape.backward(kl);
    assert!(tape.grad(student_node).is_some(), "student missed its gradient");
    assert!(tape.grad(teacher_node).is_none(), "gradient leaked into the teacher");

    // Whole-batch check: every recorded gradient belongs to a student
    // parameter; teacher embeddings are plain values with no tape presence.
    let config = EncoderConfig { embed_dim: 8, patch_size: 8, depth: 1, heads: 2, max_tokens: 6 };
    let model = ScenarioModel::new(config.clone(), 16, fixture_vocab(), 3).unwrap();
    let records = vec![make_record(&mut rng, 16, 2, 1)];
    let teacher_model = ScenarioModel::new(config, 16, fixture_vocab(), 4).unwrap();
    let teachers: Vec<EmbeddingSet> =
        records.iter().map(|r| teacher_model.forward_scene(r).unwrap()).collect();
    let mut tape = Tape::new();
    let binding = model.params.bind(&mut tape, true);
    let temps = TempNodes {
        global: binding.id("temp.global"),
        object: binding.id("temp.object"),
        relation: binding.id("temp.relation"),
        tau_log: binding.id("tau.log"),
    };
    let scenes: Vec<_> = records
        .iter()
        .map(|r| model.scene_nodes(&mut tape, &binding, r, true).unwrap())
        .collect();
    let loss = batch_loss_nodes(&mut tape, &scenes, &teachers, &temps, 1.0, 1.0).unwrap();
    tape.backward(loss.total);
    let mut grads = GradStore::new();
    binding.collect_grads(&tape, &mut grads);
    let student_names: BTreeSet<&str> = model.params.names().collect();
    for (name, _) in grads.iter() {
        assert!(student_names.contains(name), "gradient for unknown parameter {name}");
    }

    println!(
        "PASS distillation structure: {} nonnegative divergences sum to the loss, no gradient reaches the teacher",
        terms.len()
    );
}

// ---------------------------------------------------------------------------
// Criterion: alignment matrix shapes.
// ---------------------------------------------------------------------------

#[test]
fn alignment_matrix_shapes_for_a_four_scene_batch() {
    let mut rng = ChaCha20Rng::seed_from_u64(808);
    let counts: [(usize, usize); 4] = [(2, 1), (3, 2), (2, 1), (4, 1)];
    let records: Vec<SceneRecord> =
        counts.iter().map(|&(n_o, n_r)| make_record(&mut rng, 16, n_o, n_r)).collect();
    let sum_o: usize = counts.iter().map(|c| c.0).sum();
    let sum_r: usize = counts.iter().map(|c| c.1).sum();
    let negs = 3 * sum_r;

    let config = EncoderConfig { embed_dim: 8, patch_size: 8, depth: 1, heads: 2, max_tokens: 6 };
    let model = ScenarioModel::new(config, 16, fixture_vocab(), 21).unwrap();
    let sets: Vec<EmbeddingSet> =
        records.iter().map(|r| model.forward_scene(r).unwrap()).collect();
    let negatives = embed_negatives(&model, &records);

    let ca = ca_loss(&sets, &negatives, &level_temps(&model)).unwrap();
    assert_eq!(ca.shapes.global, (4, 4));
    assert_eq!(ca.shapes.object, (sum_o, sum_o));
    assert_eq!(ca.shapes.relation, (sum_r, sum_r + negs));

    // The tape path must agree with the value path on the same batch.
    let teachers = sets.clone();
    let mut tape = Tape::new();
    let binding = model.params.bind(&mut tape, true);
    let temps = TempNodes {
        global: binding.id("temp.global"),
        object: binding.id("temp.object"),
        relation: binding.id("temp.relation"),
        tau_log: binding.id("tau.log"),
    };
    let scenes: Vec<_> = records
        .iter()
        .map(|r| model.scene_nodes(&mut tape, &binding, r, true).unwrap())
        .collect();
    let loss = batch_loss_nodes(&mut tape, &scenes, &teachers, &temps, 1.0, 1.0).unwrap();
    assert_eq!(loss.shapes.global, (4, 4));
    assert_eq!(loss.shapes.object, (sum_o, sum_o));
    assert_eq!(loss.shapes.relation, (sum_r, sum_r + negs));

    println!(
        "PASS alignment shapes: global 4x4, object {sum_o}x{sum_o}, relation {sum_r}x{} on both loss paths",
        sum_r + negs
    );
}

// ---------------------------------------------------------------------------
// Criterion: end-to-end training quality (shared artifacts).
// ---------------------------------------------------------------------------

struct PipelineArtifacts {
    reports: Vec<MetricsReport>,
    top1: BTreeMap<&'static str, f64>,
    first_epoch_mean: f64,
    final_epoch_mean: f64,
    train_seconds: f64,
    total_seconds: f64,
}

fn pipeline() -> &'static PipelineArtifacts {
    static ARTIFACTS: OnceLock<PipelineArtifacts> = OnceLock::new();
    ARTIFACTS.get_or_init(|| {
        let started = Instant::now();
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
            .join(format!("acceptance_pipeline_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&root);
        let data_dir = root.join("dataset");
        let run_dir = root.join("run");

        let scene = SceneConfig {
            image_size: 64,
            n_actions: 8,
            n_object_classes: 12,
            n_relation_classes: 6,
            objects_per_scene: (2, 5),
            relations_per_scene: (1, 3),
            rbf_sigma: 6.0,
            blur_sigma: 2.0,
            seed: 7,
        };
        let manifest = render_dataset(&scene, 2000, &data_dir).unwrap();

        let encoder =
            EncoderConfig { embed_dim: 64, patch_size: 16, depth: 2, heads: 4, max_tokens: 8 };
        let train_cfg = TrainConfig {
            epochs: 12,
            batch_size: 8,
            base_lr: 1e-3,
            weight_decay: 0.05,
            warmup_fraction: 0.1,
            lambda_ca: 1.0,
            lambda_kd: LambdaSchedule::anneal(1.0, 0.0),
            ema_decay: 0.999,
            ema_warmup_steps: 50,
            seed: 7,
        };
        let train_started = Instant::now();
        let outcome = train(&train_cfg, &encoder, &data_dir, &manifest, &run_dir).unwrap();
        let train_seconds = train_started.elapsed().as_secs_f64();

        // Per-epoch mean losses from the metrics log.
        let metrics = std::fs::read_to_string(&outcome.metrics_path).unwrap();
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for line in metrics.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let epoch = v["epoch"].as_u64().unwrap() as usize;
            let entry = sums.entry(epoch).or_insert((0.0, 0));
            entry.0 += v["l_total"].as_f64().unwrap();
            entry.1 += 1;
        }
        let mean = |e: usize| {
            let (s, n) = sums[&e];
            s / n as f64
        };
        let last_epoch = *sums.keys().max().unwrap();

        let model = load_checkpoint(&outcome.checkpoint_path).unwrap().model;
        let templates = PromptTemplateSet::default_set();
        let mut reports = Vec::new();
        let mut top1 = BTreeMap::new();
        for (tag, level) in
            [("actions", Level::Global), ("objects", Level::Object), ("relations", Level::Relation)]
        {
            let classes = match level {
                Level::Global => manifest.vocab.actions.clone(),
                Level::Object => manifest.vocab.objects.clone(),
                Level::Relation => manifest.vocab.relations.clone(),
            };
            let report = zero_shot_retrieval(
                &model,
                &data_dir,
                &manifest,
                Split::Test,
                &classes,
                &templates,
                level,
            )
            .unwrap();
            top1.insert(tag, report.top1.unwrap());
            reports.push(report);
            reports.push(
                linear_probe(&model, &data_dir, &manifest, Split::Train, Split::Test, level)
                    .unwrap(),
            );
        }

        PipelineArtifacts {
            reports,
            top1,
            first_epoch_mean: mean(0),
            final_epoch_mean: mean(last_epoch),
            train_seconds,
            total_seconds: started.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn trained_pipeline_beats_five_times_chance_and_halves_the_loss() {
    let _guard = heavy_lock();
    let art = pipeline();
    let bars = [("actions", 5.0 / 8.0), ("objects", 5.0 / 12.0), ("relations", 5.0 / 6.0)];
    for (tag, bar) in bars {
        let got = art.top1[tag];
        assert!(
            got >= bar,
            "zero-shot {tag} top-1 {got:.4} below five-times-chance bar {bar:.4}"
        );
    }
    assert!(
        art.final_epoch_mean < 0.5 * art.first_epoch_mean,
        "final epoch mean {:.4} is not below half of first epoch mean {:.4}",
        art.final_epoch_mean,
        art.first_epoch_mean
    );
    println!(
        "PASS end-to-end pipeline: top-1 actions {:.3} objects {:.3} relations {:.3}, loss {:.3} -> {:.3}, train {:.0}s, total {:.0}s (target 1800s)",
        art.top1["actions"],
        art.top1["objects"],
        art.top1["relations"],
        art.first_epoch_mean,
        art.final_epoch_mean,
        art.train_seconds,
        art.total_seconds
    );
}

// ---------------------------------------------------------------------------
// Criterion: distillation ablation (informational, never blocks).
// ---------------------------------------------------------------------------

#[test]
fn distillation_ablation_summary_is_informational() {
    let _guard = heavy_lock();
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .join(format!("acceptance_ablation_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&root);
    let data_dir = root.join("dataset");
    let scene = SceneConfig {
        image_size: 64,
        n_actions: 8,
        n_object_classes: 12,
        n_relation_classes: 6,
        objects_per_scene: (2, 5),
        relations_per_scene: (1, 3),
        rbf_sigma: 6.0,
        blur_sigma: 2.0,
        seed: 900,
    };
    let manifest = render_dataset(&scene, 500, &data_dir).unwrap();
    let encoder =
        EncoderConfig { embed_dim: 32, patch_size: 16, depth: 2, heads: 2, max_tokens: 8 };
    let templates = PromptTemplateSet::default_set();

    let relation_top1 = |schedule: LambdaSchedule, seed: u64, run: &Path| -> f64 {
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 8,
            base_lr: 1e-3,
            weight_decay: 0.05,
            warmup_fraction: 0.1,
            lambda_ca: 1.0,
            lambda_kd: schedule,
            ema_decay: 0.999,
            ema_warmup_steps: 50,
            seed,
        };
        let outcome = train(&cfg, &encoder, &data_dir, &manifest, run).unwrap();
        let model = load_checkpoint(&outcome.checkpoint_path).unwrap().model;
        zero_shot_retrieval(
            &model,
            &data_dir,
            &manifest,
            Split::Test,
            &manifest.vocab.relations,
            &templates,
            Level::Relation,
        )
        .unwrap()
        .top1
        .unwrap()
    };

    let seeds = [101u64, 202, 303];
    let mut gaps = Vec::new();
    for seed in seeds {
        let full = relation_top1(
            LambdaSchedule::fixed(1.0),
            seed,
            &root.join(format!("full_{seed}")),
        );
        let none =
            relation_top1(LambdaSchedule::fixed(0.0), seed, &root.join(format!("none_{seed}")));
        let gap = (full - none) * 100.0;
        gaps.push(gap);
        println!(
            "INFO distillation ablation seed {seed}: relation top-1 full {full:.3} vs none {none:.3} ({gap:+.1} points)"
        );
    }
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let verdict = if mean_gap >= -2.0 { "within" } else { "OUTSIDE" };
    println!(
        "INFO distillation ablation: mean gap {mean_gap:+.1} points over {} seeds, {verdict} the -2 point allowance (informational only)",
        seeds.len()
    );
    let _ = std::fs::remove_dir_all(&root);
}

// ---------------------------------------------------------------------------
// Criterion: overlap metric identities and report monotonicity.
// ---------------------------------------------------------------------------

#[test]
fn dice_iou_identity_and_emitted_report_monotonicity() {
    let mut rng = ChaCha20Rng::seed_from_u64(1234);
    for case in 0..100 {
        let (h, w) = (rng.gen_range(2..14), rng.gen_range(2..14));
        let pred = Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0..1.0));
        let truth = Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0..1.0));
        let threshold = rng.gen_range(0.2..0.8);
        let (dice, iou) = binary_dice_iou(&pred, &truth, threshold).unwrap();

        // Recount from scratch and pin both metrics to their integer forms.
        let mut inter = 0usize;
        let mut pa = 0usize;
        let mut ta = 0usize;
        for (p, t) in pred.iter().zip(truth.iter()) {
            let p = *p >= threshold;
            let t = *t >= threshold;
            inter += (p && t) as usize;
            pa += p as usize;
            ta += t as usize;
        }
        let union = pa + ta - inter;
        if union == 0 {
            assert_eq!((dice, iou), (1.0, 1.0));
            continue;
        }
        assert_eq!(iou, inter as f64 / union as f64, "iou recount differs in case {case}");
        assert_eq!(dice, 2.0 * inter as f64 / (pa + ta) as f64, "dice recount differs in case {case}");
        // The algebraic identity dice = 2 iou / (1 + iou), exact in the
        // integer counts: dice (pa + ta) = 2 inter = 2 iou union and
        // pa + ta = union (1 + iou).
        let identity = 2.0 * iou / (1.0 + iou);
        assert!(
            (dice - identity).abs() <= 4.0 * f64::EPSILON * dice.max(identity).max(1e-300),
            "identity violated in case {case}: dice {dice} vs {identity}"
        );
    }

    let _guard = heavy_lock();
    let art = pipeline();
    for report in &art.reports {
        report.validate().unwrap();
        if let (Some(t1), Some(t5), Some(t10)) = (report.top1, report.top5, report.top10) {
            assert!(t1 <= t5 && t5 <= t10, "top-k chain broken in {}", report.task);
        }
    }
    println!(
        "PASS overlap metrics: dice/iou identity exact on 100 random mask pairs, top-k chains monotone on {} emitted reports",
        art.reports.len()
    );
}

// ---------------------------------------------------------------------------
// Criterion: clustering oracle and negative-triplet hygiene.
// ---------------------------------------------------------------------------

struct Dsu {
    parent: Vec<usize>,
}

impl Dsu {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }
    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let root = self.find(self.parent[x]);
            self.parent[x] = root;
        }
        self.parent[x]
    }
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra] = rb;
        true
    }
}

/// Independent partition oracle: Kruskal spanning tree over mutual
/// reachability (the shipped path uses Prim), the same descending-gap
/// threshold rule, then grouping with the same naming and noise rules.
fn oracle_partition(
    labels: &[String],
    k_cfg: usize,
    min_cluster_size: usize,
) -> (BTreeMap<String, String>, BTreeSet<String>) {
    let embedder = NgramEmbedder::default();
    let points: Vec<Vec<f64>> = labels.iter().map(|l| embedder.embed(l).unwrap()).collect();
    let n = points.len();
    let k = k_cfg.min(n - 1);
    let core: Vec<f64> = (0..n)
        .map(|p| {
            let mut d: Vec<f64> = (0..n)
                .filter(|&q| q != p)
                .map(|q| oracle_cosine_distance(&points[p], &points[q]))
                .collect();
            d.sort_by(|x, y| x.partial_cmp(y).unwrap());
            d[k - 1]
        })
        .collect();
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            let w = core[a]
                .max(core[b])
                .max(oracle_cosine_distance(&points[a], &points[b]));
            edges.push((w, a, b));
        }
    }
    edges.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut dsu = Dsu::new(n);
    let mut tree: Vec<(f64, usize, usize)> = Vec::new();
    for &(w, a, b) in &edges {
        if dsu.union(a, b) {
            tree.push((w, a, b));
        }
    }

    // Threshold at the midpoint of the largest gap in the descending weight
    // sequence, ignoring near-zero duplicate joins; no informative gap
    // means no cut.
    let mut weights: Vec<f64> = tree.iter().map(|e| e.0).filter(|w| *w > 1e-12).collect();
    weights.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let mut best_gap = 0.0;
    let mut threshold = f64::INFINITY;
    for pair in weights.windows(2) {
        let gap = pair[0] - pair[1];
        if gap > best_gap {
            best_gap = gap;
            threshold = (pair[0] + pair[1]) / 2.0;
        }
    }

    let mut dsu = Dsu::new(n);
    for &(w, a, b) in &tree {
        if w <= threshold {
            dsu.union(a, b);
        }
    }
    let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = dsu.find(i);
        comps.entry(root).or_default().push(i);
    }
    let mut ordered: Vec<Vec<usize>> = comps.into_values().collect();
    for c in &mut ordered {
        c.sort_unstable();
    }
    ordered.sort_by_key(|c| c[0]);

    let mut canonical = BTreeMap::new();
    let mut noise = BTreeSet::new();
    for comp in ordered {
        if comp.len() >= min_cluster_size {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for &i in &comp {
                *counts.entry(labels[i].as_str()).or_default() += 1;
            }
            let best = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(name, _)| name.to_string())
                .unwrap();
            for &i in &comp {
                canonical.insert(labels[i].clone(), best.clone());
            }
        } else {
            for &i in &comp {
                noise.insert(labels[i].clone());
            }
        }
    }
    for grouped in canonical.keys() {
        noise.remove(grouped);
    }
    (canonical, noise)
}

#[test]
fn clustering_matches_an_independent_mst_oracle_and_negatives_avoid_truths() {
    // Thirty distinct labels: three morphological families and four strays.
    let labels: Vec<String> = [
        "cat", "cats", "catty", "catlike", "cathood", "catnip", "catfish", "catkin", "catcall",
        "piano", "pianos", "pianist", "pianism", "pianola", "pianino", "pianistic", "pianoforte",
        "pianissimo", "river", "rivers", "riverine", "riverbed", "riverbank", "riverside",
        "riverboat", "riverlet", "xylophone", "quartz", "embassy", "glacier",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    assert_eq!(labels.len(), 30);

    let config = ClusterConfig::default();
    let state = cluster_objects(&labels, &config, &NgramEmbedder::default()).unwrap();
    let (oracle_map, oracle_noise) = oracle_partition(&labels, config.k, config.min_cluster_size);

    let mut shipped_map = BTreeMap::new();
    for (label, gid) in &state.group_assignments {
        shipped_map.insert(label.clone(), state.group_names[gid].clone());
    }
    assert_eq!(shipped_map, oracle_map, "group partition or naming differs from the oracle");
    let shipped_noise: BTreeSet<String> = state.noise_labels.iter().cloned().collect();
    assert_eq!(shipped_noise, oracle_noise, "noise set differs from the oracle");
    let groups: BTreeSet<&String> = shipped_map.values().collect();
    assert!(groups.len() >= 2, "fixture degenerated into {} group(s)", groups.len());

    // Negative triplets sampled across fresh scenes must never repeat a
    // scene truth, whether read back from the record or regenerated.
    let scene = SceneConfig {
        image_size: 64,
        n_actions: 8,
        n_object_classes: 12,
        n_relation_classes: 6,
        objects_per_scene: (2, 5),
        relations_per_scene: (1, 3),
        rbf_sigma: 6.0,
        blur_sigma: 2.0,
        seed: 0,
    };
    let antonyms = builtin_antonyms();
    let mut scenes = 0usize;
    let mut negatives_checked = 0usize;
    for seed in 0..500u64 {
        let record = generate_scene(&scene, seed).unwrap();
        let truths: BTreeSet<Triplet> =
            record.relations.iter().map(|r| r.triplet.clone()).collect();
        for (idx, rel) in record.relations.iter().enumerate() {
            for neg in &rel.negatives {
                assert!(!truths.contains(neg), "stored negative {neg:?} is a scene truth");
                negatives_checked += 1;
            }
            let fresh = generate_negative_triplets(&record, idx, &antonyms, 3).unwrap();
            for neg in &fresh {
                assert!(!truths.contains(neg), "fresh negative {neg:?} is a scene truth");
                negatives_checked += 1;
            }
        }
        scenes += 1;
    }
    println!(
        "PASS clustering and negatives: partition of 30 labels into {} groups matches the oracle, {negatives_checked} negatives across {scenes} scenes avoid all truths",
        groups.len()
    );
}

// ---------------------------------------------------------------------------
// Criterion: byte-identical reruns through the command line.
// ---------------------------------------------------------------------------

#[test]
fn same_seed_command_line_runs_are_byte_identical() {
    let _guard = heavy_lock();
    let base = PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .join(format!("acceptance_determinism_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&base);
    std::fs::create_dir_all(&base).unwrap();
    let config_path = base.join("config.toml");
    std::fs::write(
        &config_path,
        r#"
seed = 33

[scene]
image_size = 32
n_actions = 3
n_object_classes = 6
n_relation_classes = 4
objects_per_scene = [2, 3]
relations_per_scene = [1, 2]
rbf_sigma = 4.0
blur_sigma = 1.5

[generate]
scenes = 24

[encoder]
embed_dim = 8
patch_size = 16
depth = 1
heads = 2
max_tokens = 6

[train]
epochs = 2
batch_size = 4
base_lr = 1e-3
weight_decay = 0.05
warmup_fraction = 0.2
ema_decay = 0.99
ema_warmup_steps = 3

[train.lambda_kd]
kind = "fixed"
value = 1.0

[eval]
tasks = ["zeroshot", "dump"]
"#,
    )
    .unwrap();

    let run_all = |root: &Path| {
        for args in [&["generate"][..], &["train"], &["eval"]] {
            let output = Command::new(env!("CARGO_BIN_EXE_scenewise"))
                .arg(args[0])
                .arg("--config")
                .arg(&config_path)
                .env("SCENEWISE_OUTPUT_ROOT", root)
                .output()
                .unwrap();
            assert!(
                output.status.success(),
                "{} failed under {root:?}: {}",
                args[0],
                String::from_utf8_lossy(&output.stderr)
            );
        }
    };
    let root_a = base.join("first");
    let root_b = base.join("second");
    run_all(&root_a);
    run_all(&root_b);

    let compare = [
        "dataset/manifest.json",
        "run/checkpoint_final.swck",
        "run/metrics.jsonl",
        "reports/zeroshot_actions.json",
        "reports/zeroshot_objects.json",
        "reports/zeroshot_relations.json",
        "dump/objects_test.f64",
        "dump/objects_test.labels.tsv",
    ];
    let mut bytes_total = 0usize;
    for rel in compare {
        let a = std::fs::read(root_a.join(rel)).unwrap();
        let b = std::fs::read(root_b.join(rel)).unwrap();
        assert!(a == b, "artifact {rel} differs between identical runs");
        bytes_total += a.len();
    }
    let _ = std::fs::remove_dir_all(&base);
    println!(
        "PASS reproducibility: {} artifacts ({bytes_total} bytes) byte-identical across two same-seed pipelines",
        compare.len()
    );
}
