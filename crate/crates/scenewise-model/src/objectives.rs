//! The loss system: symmetric contrastive alignment at three levels (with
//! negative-triplet columns at the relation level), intra-modal knowledge
//! distillation against a frozen teacher, and their weighted combination.
//!
//! Every loss has two faces: a tape-level builder used by the training loop
//! (so temperatures receive gradients), and a value-level function matching
//! the documented operation signatures, implemented on top of the same
//! builders with constant inputs.

use ndarray::{Array1, Array2, Axis};

use crate::encoders::{EmbeddingSet, SceneNodes};
use crate::error::{ModelError, Result};
use crate::tape::{NodeId, Tape};

/// Additive mask that removes a logit column from a softmax row.
const MASK_NEG: f64 = -1e30;

/// Contrastive temperatures per alignment level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelTemps {
    pub global: f64,
    pub object: f64,
    pub relation: f64,
}

impl LevelTemps {
    pub fn uniform(t: f64) -> Self {
        Self { global: t, object: t, relation: t }
    }

    fn validate(&self) -> Result<()> {
        for t in [self.global, self.object, self.relation] {
            if !(t > 0.0) {
                return Err(ModelError::InvalidParameter(format!(
                    "temperature must be positive, got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Logit matrix dimensions at each level, in the extended image-to-text
/// direction for the relation level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AlignmentShapes {
    pub global: (usize, usize),
    pub object: (usize, usize),
    pub relation: (usize, usize),
}

/// Stacked per-level embeddings for one batch, rows paired by index.
#[derive(Debug, Clone)]
pub struct AlignmentBatch {
    pub v_g: Array2<f64>,
    pub t_g: Array2<f64>,
    pub v_o: Array2<f64>,
    pub t_o: Array2<f64>,
    pub v_r: Array2<f64>,
    pub t_r: Array2<f64>,
    /// One negative-embedding stack per relation row.
    pub relation_negatives: Vec<Array2<f64>>,
}

impl AlignmentBatch {
    /// Stacks per-scene embedding sets; `relation_negatives` holds one
    /// entry per relation row, in scene order.
    pub fn from_sets(
        sets: &[EmbeddingSet],
        relation_negatives: Vec<Array2<f64>>,
    ) -> Result<Self> {
        if sets.is_empty() {
            return Err(ModelError::InvalidInput("empty batch".into()));
        }
        let d = sets[0].v_g.len();
        let stack_g = |pick: &dyn Fn(&EmbeddingSet) -> &Array1<f64>| {
            let mut m = Array2::zeros((sets.len(), d));
            for (i, s) in sets.iter().enumerate() {
                m.row_mut(i).assign(pick(s));
            }
            m
        };
        let stack_rows = |pick: &dyn Fn(&EmbeddingSet) -> &Array2<f64>| {
            let total: usize = sets.iter().map(|s| pick(s).nrows()).sum();
            let mut m = Array2::zeros((total, d));
            let mut r = 0;
            for s in sets {
                let block = pick(s);
                for row in block.rows() {
                    m.row_mut(r).assign(&row);
                    r += 1;
                }
            }
            m
        };
        let batch = Self {
            v_g: stack_g(&|s| &s.v_g),
            t_g: stack_g(&|s| &s.t_g),
            v_o: stack_rows(&|s| &s.v_o),
            t_o: stack_rows(&|s| &s.t_o),
            v_r: stack_rows(&|s| &s.v_r),
            t_r: stack_rows(&|s| &s.t_r),
            relation_negatives,
        };
        if batch.relation_negatives.len() != batch.v_r.nrows() {
            return Err(ModelError::InvalidInput(format!(
                "need one negative stack per relation row: {} rows, {} stacks",
                batch.v_r.nrows(),
                batch.relation_negatives.len()
            )));
        }
        Ok(batch)
    }
}

/// All loss components of one step, with the weights in effect.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_total: f64,
    pub l_kd: f64,
    pub l_ca: f64,
    pub ca_global: f64,
    pub ca_object: f64,
    pub ca_relation: f64,
    pub lambda_kd: f64,
    pub lambda_ca: f64,
    pub shapes: AlignmentShapes,
}

/// Tape nodes of the per-level log-temperatures and the log distillation
/// temperature, as bound from the parameter store.
#[derive(Debug, Clone, Copy)]
pub struct TempNodes {
    pub global: NodeId,
    pub object: NodeId,
    pub relation: NodeId,
    pub tau_log: NodeId,
}

/// Loss nodes built for one batch; values are read off after forward.
#[derive(Debug, Clone, Copy)]
pub struct BatchLossNodes {
    pub total: NodeId,
    pub kd: NodeId,
    pub ca: NodeId,
    pub ca_global: NodeId,
    pub ca_object: NodeId,
    pub ca_relation: NodeId,
    pub shapes: AlignmentShapes,
}

/// exp(-log_value) as a node: converts a log-temperature into an inverse
/// temperature with gradient flow into the log parameter.
pub fn inv_from_log(tape: &mut Tape, log_node: NodeId) -> NodeId {
    let neg = tape.scale(log_node, -1.0);
    tape.exp(neg)
}

/// Symmetric InfoNCE over paired rows: both directions' cross-entropies
/// against the diagonal, averaged.
pub fn contrastive_term(tape: &mut Tape, img: NodeId, txt: NodeId, inv_temp: NodeId) -> NodeId {
    let img_n = tape.l2_normalize_rows(img);
    let txt_n = tape.l2_normalize_rows(txt);
    let sim_it = tape.matmul_nt(img_n, txt_n);
    let logits_it = tape.mul_scalar(sim_it, inv_temp);
    let sim_ti = tape.matmul_nt(txt_n, img_n);
    let logits_ti = tape.mul_scalar(sim_ti, inv_temp);
    let lsm_it = tape.log_softmax_rows(logits_it);
    let lsm_ti = tape.log_softmax_rows(logits_ti);
    let ce_it = tape.diag_mean(lsm_it);
    let ce_ti = tape.diag_mean(lsm_ti);
    let sum = tape.add(ce_it, ce_ti);
    tape.scale(sum, -0.5)
}

/// Relation-level contrastive term. The image-to-text direction appends one
/// logit column per negative caption; a column only competes in its owner
/// row (other rows see an additive mask). The text-to-image direction uses
/// the plain in-batch matrix.
pub fn relation_contrastive_term(
    tape: &mut Tape,
    v: NodeId,
    t: NodeId,
    negatives_per_row: &[NodeId],
    inv_temp: NodeId,
) -> Result<NodeId> {
    let n = tape.value(v).nrows();
    if negatives_per_row.len() != n {
        return Err(ModelError::InvalidInput(format!(
            "expected {n} negative stacks, got {}",
            negatives_per_row.len()
        )));
    }
    let counts: Vec<usize> = negatives_per_row
        .iter()
        .map(|id| tape.value(*id).nrows())
        .collect();
    if counts.iter().any(|&c| c == 0) {
        return Err(ModelError::InvalidInput(
            "every relation row needs at least one negative".into(),
        ));
    }
    let m: usize = counts.iter().sum();
    let v_n = tape.l2_normalize_rows(v);
    let t_n = tape.l2_normalize_rows(t);
    let negs = tape.concat_rows(negatives_per_row);
    let negs_n = tape.l2_normalize_rows(negs);
    let base = tape.matmul_nt(v_n, t_n);
    let extra = tape.matmul_nt(v_n, negs_n);
    let full = tape.concat_cols(&[base, extra]);
    let logits = tape.mul_scalar(full, inv_temp);
    // Column n+j belongs to the row whose negative stack contains j; every
    // other row masks it out of its softmax.
    let mut owner = vec![0usize; m];
    let mut j = 0;
    for (row, count) in counts.iter().enumerate() {
        for _ in 0..*count {
            owner[j] = row;
            j += 1;
        }
    }
    let mut mask = Array2::zeros((n, n + m));
    for row in 0..n {
        for (col, own) in owner.iter().enumerate() {
            if *own != row {
                mask[[row, n + col]] = MASK_NEG;
            }
        }
    }
    let masked = tape.add_const(logits, &mask);
    let lsm_it = tape.log_softmax_rows(masked);
    let ce_it = tape.diag_mean(lsm_it);
    let sim_ti = tape.matmul_nt(t_n, v_n);
    let logits_ti = tape.mul_scalar(sim_ti, inv_temp);
    let lsm_ti = tape.log_softmax_rows(logits_ti);
    let ce_ti = tape.diag_mean(lsm_ti);
    let sum = tape.add(ce_it, ce_ti);
    Ok(tape.scale(sum, -0.5))
}

/// One KL divergence term between softened embeddings. `teacher` must be a
/// constant node; `inv_tau` and `tau_sq` are shared temperature nodes.
pub fn kl_term(
    tape: &mut Tape,
    teacher: NodeId,
    student: NodeId,
    inv_tau: NodeId,
    tau_sq: NodeId,
) -> NodeId {
    let a = tape.mul_scalar(teacher, inv_tau);
    let b = tape.mul_scalar(student, inv_tau);
    let p = tape.softmax_rows(a);
    let lp = tape.log_softmax_rows(a);
    let lq = tape.log_softmax_rows(b);
    let diff = tape.sub(lp, lq);
    let weighted = tape.mul(p, diff);
    let kl = tape.sum_all(weighted);
    tape.mul(kl, tau_sq)
}

fn row_const(tape: &mut Tape, v: &Array1<f64>) -> NodeId {
    tape.constant(v.clone().insert_axis(Axis(0)))
}

/// Sum of a scene's distillation terms: the teacher's global visual
/// embedding against each student object/relation visual embedding, and
/// the teacher's local text embeddings against the student's global text
/// embedding (the inverted text direction).
pub fn scene_kd_term(
    tape: &mut Tape,
    scene: &SceneNodes,
    teacher: &EmbeddingSet,
    inv_tau: NodeId,
    tau_sq: NodeId,
) -> Result<NodeId> {
    if scene.n_o != teacher.n_o || scene.n_r != teacher.n_r {
        return Err(ModelError::InvalidInput(format!(
            "teacher/student count mismatch: ({}, {}) vs ({}, {})",
            scene.n_o, scene.n_r, teacher.n_o, teacher.n_r
        )));
    }
    let mut acc = tape.constant(Array2::zeros((1, 1)));
    let teacher_vg = row_const(tape, &teacher.v_g);
    if let Some(v_o) = scene.v_o {
        for i in 0..scene.n_o {
            let student = tape.slice_rows(v_o, i, i + 1);
            let term = kl_term(tape, teacher_vg, student, inv_tau, tau_sq);
            acc = tape.add(acc, term);
        }
    }
    if let Some(v_r) = scene.v_r {
        for j in 0..scene.n_r {
            let student = tape.slice_rows(v_r, j, j + 1);
            let term = kl_term(tape, teacher_vg, student, inv_tau, tau_sq);
            acc = tape.add(acc, term);
        }
    }
    for i in 0..scene.n_o {
        let teacher_to = row_const(tape, &teacher.t_o.row(i).to_owned());
        let term = kl_term(tape, teacher_to, scene.t_g, inv_tau, tau_sq);
        acc = tape.add(acc, term);
    }
    for j in 0..scene.n_r {
        let teacher_tr = row_const(tape, &teacher.t_r.row(j).to_owned());
        let term = kl_term(tape, teacher_tr, scene.t_g, inv_tau, tau_sq);
        acc = tape.add(acc, term);
    }
    Ok(acc)
}

/// Builds the full batch loss on the tape: three-level contrastive
/// alignment plus batch-mean distillation, weighted by the lambdas.
pub fn batch_loss_nodes(
    tape: &mut Tape,
    scenes: &[SceneNodes],
    teachers: &[EmbeddingSet],
    temps: &TempNodes,
    lambda_kd: f64,
    lambda_ca: f64,
) -> Result<BatchLossNodes> {
    if scenes.is_empty() {
        return Err(ModelError::InvalidInput("empty batch".into()));
    }
    if scenes.len() != teachers.len() {
        return Err(ModelError::InvalidInput(
            "teacher/student batch size mismatch".into(),
        ));
    }
    if lambda_kd < 0.0 || lambda_ca <= 0.0 {
        return Err(ModelError::InvalidParameter(
            "lambda_kd must be >= 0 and lambda_ca > 0".into(),
        ));
    }
    let b = scenes.len();
    let inv_g = inv_from_log(tape, temps.global);
    let inv_o = inv_from_log(tape, temps.object);
    let inv_r = inv_from_log(tape, temps.relation);
    let inv_tau = inv_from_log(tape, temps.tau_log);
    let two_log_tau = tape.scale(temps.tau_log, 2.0);
    let tau_sq = tape.exp(two_log_tau);

    let vg_rows: Vec<NodeId> = scenes.iter().map(|s| s.v_g).collect();
    let tg_rows: Vec<NodeId> = scenes.iter().map(|s| s.t_g).collect();
    let v_g = tape.concat_rows(&vg_rows);
    let t_g = tape.concat_rows(&tg_rows);
    let ca_global = contrastive_term(tape, v_g, t_g, inv_g);

    let zero = |tape: &mut Tape| tape.constant(Array2::zeros((1, 1)));
    let v_o_parts: Vec<NodeId> = scenes.iter().filter_map(|s| s.v_o).collect();
    let t_o_parts: Vec<NodeId> = scenes.iter().filter_map(|s| s.t_o).collect();
    let n_obj: usize = scenes.iter().map(|s| s.n_o).sum();
    let (ca_object, obj_shape) = if n_obj > 0 {
        let v_o = tape.concat_rows(&v_o_parts);
        let t_o = tape.concat_rows(&t_o_parts);
        (contrastive_term(tape, v_o, t_o, inv_o), (n_obj, n_obj))
    } else {
        (zero(tape), (0, 0))
    };

    let v_r_parts: Vec<NodeId> = scenes.iter().filter_map(|s| s.v_r).collect();
    let t_r_parts: Vec<NodeId> = scenes.iter().filter_map(|s| s.t_r).collect();
    let negatives: Vec<NodeId> = scenes
        .iter()
        .flat_map(|s| s.t_r_negatives.iter().copied())
        .collect();
    let n_rel: usize = scenes.iter().map(|s| s.n_r).sum();
    let (ca_relation, rel_shape) = if n_rel > 0 {
        let v_r = tape.concat_rows(&v_r_parts);
        let t_r = tape.concat_rows(&t_r_parts);
        let m: usize = negatives.iter().map(|id| tape.value(*id).nrows()).sum();
        let term = relation_contrastive_term(tape, v_r, t_r, &negatives, inv_r)?;
        (term, (n_rel, n_rel + m))
    } else {
        (zero(tape), (0, 0))
    };

    let ca_go = tape.add(ca_global, ca_object);
    let ca = tape.add(ca_go, ca_relation);

    let mut kd_sum = zero(tape);
    for (scene, teacher) in scenes.iter().zip(teachers.iter()) {
        let term = scene_kd_term(tape, scene, teacher, inv_tau, tau_sq)?;
        kd_sum = tape.add(kd_sum, term);
    }
    let kd = tape.scale(kd_sum, 1.0 / b as f64);

    let kd_w = tape.scale(kd, lambda_kd);
    let ca_w = tape.scale(ca, lambda_ca);
    let total = tape.add(kd_w, ca_w);
    Ok(BatchLossNodes {
        total,
        kd,
        ca,
        ca_global,
        ca_object,
        ca_relation,
        shapes: AlignmentShapes { global: (b, b), object: obj_shape, relation: rel_shape },
    })
}

/// Reads the component values of a built batch loss into a breakdown.
pub fn read_breakdown(
    tape: &Tape,
    nodes: &BatchLossNodes,
    lambda_kd: f64,
    lambda_ca: f64,
) -> LossBreakdown {
    let v = |id: NodeId| tape.value(id)[[0, 0]];
    LossBreakdown {
        l_total: v(nodes.total),
        l_kd: v(nodes.kd),
        l_ca: v(nodes.ca),
        ca_global: v(nodes.ca_global),
        ca_object: v(nodes.ca_object),
        ca_relation: v(nodes.ca_relation),
        lambda_kd,
        lambda_ca,
        shapes: nodes.shapes,
    }
}

fn check_paired(img: &Array2<f64>, txt: &Array2<f64>) -> Result<()> {
    if img.nrows() == 0 {
        return Err(ModelError::InvalidInput("empty contrastive batch".into()));
    }
    if img.dim() != txt.dim() {
        return Err(ModelError::InvalidInput(format!(
            "paired shape mismatch: {:?} vs {:?}",
            img.dim(),
            txt.dim()
        )));
    }
    Ok(())
}

fn check_temp(temperature: f64) -> Result<()> {
    if !(temperature > 0.0) {
        return Err(ModelError::InvalidParameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(())
}

/// Symmetric contrastive loss over paired rows at a fixed temperature.
pub fn contrastive_loss(img: &Array2<f64>, txt: &Array2<f64>, temperature: f64) -> Result<f64> {
    check_paired(img, txt)?;
    check_temp(temperature)?;
    let mut tape = Tape::new();
    let i = tape.constant(img.clone());
    let t = tape.constant(txt.clone());
    let inv = tape.constant(Array2::from_elem((1, 1), 1.0 / temperature));
    let out = contrastive_term(&mut tape, i, t, inv);
    Ok(tape.value(out)[[0, 0]])
}

/// Relation-level contrastive loss with per-row negative text embeddings.
pub fn relation_contrastive_loss(
    v_r: &Array2<f64>,
    t_r: &Array2<f64>,
    negatives_per_row: &[Array2<f64>],
    temperature: f64,
) -> Result<f64> {
    check_paired(v_r, t_r)?;
    check_temp(temperature)?;
    if negatives_per_row.len() != v_r.nrows()
        || negatives_per_row.iter().any(|n| n.nrows() == 0)
    {
        return Err(ModelError::InvalidInput(
            "every relation row needs at least one negative".into(),
        ));
    }
    let mut tape = Tape::new();
    let v = tape.constant(v_r.clone());
    let t = tape.constant(t_r.clone());
    let negs: Vec<NodeId> = negatives_per_row
        .iter()
        .map(|n| tape.constant(n.clone()))
        .collect();
    let inv = tape.constant(Array2::from_elem((1, 1), 1.0 / temperature));
    let out = relation_contrastive_term(&mut tape, v, t, &negs, inv)?;
    Ok(tape.value(out)[[0, 0]])
}

/// KL divergence between temperature-softened embeddings, scaled by tau².
/// The teacher distribution is the reference (first KL argument).
pub fn kl_embedding_divergence(
    teacher_vec: &Array1<f64>,
    student_vec: &Array1<f64>,
    tau: f64,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(ModelError::InvalidParameter(format!(
            "tau must be positive, got {tau}"
        )));
    }
    if teacher_vec.len() != student_vec.len() {
        return Err(ModelError::InvalidInput(
            "teacher/student dimension mismatch".into(),
        ));
    }
    let mut tape = Tape::new();
    let teacher = row_const(&mut tape, teacher_vec);
    let student = row_const(&mut tape, student_vec);
    let inv = tape.constant(Array2::from_elem((1, 1), 1.0 / tau));
    let tau_sq = tape.constant(Array2::from_elem((1, 1), tau * tau));
    let out = kl_term(&mut tape, teacher, student, inv, tau_sq);
    Ok(tape.value(out)[[0, 0]])
}

/// Scene distillation loss: global-to-local on the visual side, local-to-
/// global on the text side, summed over all terms.
pub fn kd_loss(student: &EmbeddingSet, teacher: &EmbeddingSet, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(ModelError::InvalidParameter(format!(
            "tau must be positive, got {tau}"
        )));
    }
    if student.n_o != teacher.n_o || student.n_r != teacher.n_r {
        return Err(ModelError::InvalidInput(format!(
            "teacher/student count mismatch: ({}, {}) vs ({}, {})",
            student.n_o, student.n_r, teacher.n_o, teacher.n_r
        )));
    }
    let mut total = 0.0;
    for i in 0..student.n_o {
        total += kl_embedding_divergence(&teacher.v_g, &student.v_o.row(i).to_owned(), tau)?;
    }
    for j in 0..student.n_r {
        total += kl_embedding_divergence(&teacher.v_g, &student.v_r.row(j).to_owned(), tau)?;
    }
    for i in 0..student.n_o {
        total += kl_embedding_divergence(&teacher.t_o.row(i).to_owned(), &student.t_g, tau)?;
    }
    for j in 0..student.n_r {
        total += kl_embedding_divergence(&teacher.t_r.row(j).to_owned(), &student.t_g, tau)?;
    }
    Ok(total)
}

/// Per-level and total contrastive alignment values for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaTerms {
    pub total: f64,
    pub global: f64,
    pub object: f64,
    pub relation: f64,
    pub shapes: AlignmentShapes,
}

/// Contrastive alignment loss over a batch: global term on B stacked pairs,
/// object and relation terms on the concatenated row stacks, relation
/// negatives appended as extra columns. `relation_negatives` has one stack
/// per relation row across the batch, in scene order.
pub fn ca_loss(
    sets: &[EmbeddingSet],
    relation_negatives: &[Array2<f64>],
    temps: &LevelTemps,
) -> Result<CaTerms> {
    temps.validate()?;
    let batch = AlignmentBatch::from_sets(sets, relation_negatives.to_vec())?;
    let b = sets.len();
    let global = contrastive_loss(&batch.v_g, &batch.t_g, temps.global)?;
    let (object, obj_shape) = if batch.v_o.nrows() > 0 {
        (
            contrastive_loss(&batch.v_o, &batch.t_o, temps.object)?,
            (batch.v_o.nrows(), batch.v_o.nrows()),
        )
    } else {
        (0.0, (0, 0))
    };
    let (relation, rel_shape) = if batch.v_r.nrows() > 0 {
        let m: usize = batch.relation_negatives.iter().map(Array2::nrows).sum();
        (
            relation_contrastive_loss(
                &batch.v_r,
                &batch.t_r,
                &batch.relation_negatives,
                temps.relation,
            )?,
            (batch.v_r.nrows(), batch.v_r.nrows() + m),
        )
    } else {
        (0.0, (0, 0))
    };
    Ok(CaTerms {
        total: global + object + relation,
        global,
        object,
        relation,
        shapes: AlignmentShapes { global: (b, b), object: obj_shape, relation: rel_shape },
    })
}

/// Combined loss: lambda_kd times the batch-mean distillation loss plus
/// lambda_ca times the contrastive alignment loss.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    students: &[EmbeddingSet],
    teachers: &[EmbeddingSet],
    relation_negatives: &[Array2<f64>],
    lambda_kd: f64,
    lambda_ca: f64,
    temps: &LevelTemps,
    tau: f64,
) -> Result<LossBreakdown> {
    if lambda_kd < 0.0 || lambda_ca <= 0.0 {
        return Err(ModelError::InvalidParameter(
            "lambda_kd must be >= 0 and lambda_ca > 0".into(),
        ));
    }
    if students.len() != teachers.len() || students.is_empty() {
        return Err(ModelError::InvalidInput(
            "student/teacher batch size mismatch".into(),
        ));
    }
    let ca = ca_loss(students, relation_negatives, temps)?;
    let mut kd_sum = 0.0;
    for (s, t) in students.iter().zip(teachers.iter()) {
        kd_sum += kd_loss(s, t, tau)?;
    }
    let l_kd = kd_sum / students.len() as f64;
    Ok(LossBreakdown {
        l_total: lambda_kd * l_kd + lambda_ca * ca.total,
        l_kd,
        l_ca: ca.total,
        ca_global: ca.global,
        ca_object: ca.object,
        ca_relation: ca.relation,
        lambda_kd,
        lambda_ca,
        shapes: ca.shapes,
    })
}
