//! The end-to-end gradient battery: every tensor primitive, every
//! differentiable geometry operation, and every loss checked against
//! central finite differences in f64.
//!
//! Used by the `grad-check` CLI command and the gradient acceptance suite;
//! any entry above its tolerance is a correctness bug, not noise.

use crate::lorentz::diff::{
    cone_violation_diag, distance_matrix, exp_map_rows, half_aperture_rows, lift_rows,
};
use crate::losses::{
    entailment_loss, euclidean_clip_loss, hyperbolic_contrastive_loss,
    interaction_distillation_loss, total_loss, BatchOnTape, LossWeights,
};
use crate::rng::Rng;
use crate::tensor::{
    check::finite_diff_check, concat, embedding_lookup, layer_norm, RawTensor, Tape, Tensor,
    TensorError,
};

/// One battery entry: op name and its worst finite-difference relative
/// error over the sampled inputs.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

const FD_STEP: f64 = 1e-5;

fn raw(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> RawTensor<f64> {
    let numel: usize = shape.iter().product();
    RawTensor::new(shape, (0..numel).map(|_| rng.uniform_in(lo, hi)).collect()).unwrap()
}

/// Contract against fixed random weights so structural gradient mistakes
/// cannot cancel in a plain sum.
fn weighted(t: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>, TensorError> {
    let shape = t.shape();
    let mut rng = Rng::seed_from_u64(seed);
    let numel: usize = shape.iter().product();
    let w: Vec<f64> = (0..numel).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let wt = t.tape().constant(RawTensor::new(&shape, w)?);
    Ok(t.mul(&wt)?.sum())
}

type Builder = Box<dyn Fn(&Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>, TensorError>>;

fn check(
    name: &str,
    reps: usize,
    seed: u64,
    input: impl Fn(&mut Rng) -> RawTensor<f64>,
    builder: Builder,
) -> GradCheckEntry {
    let mut rng = Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..reps {
        let x = input(&mut rng);
        let err = finite_diff_check(|tape, t| builder(tape, t), &x, FD_STEP)
            .expect("battery graphs are well-formed");
        worst = worst.max(err);
    }
    GradCheckEntry {
        name: name.to_string(),
        max_rel_err: worst,
    }
}

/// Run the whole battery. `reps` controls how many random inputs each op
/// sees (the reference setting is 100 for geometry ops, scaled down
/// proportionally for the composite losses).
pub fn gradient_battery(reps: usize) -> Vec<GradCheckEntry> {
    let mut out = Vec::new();
    let r = reps.max(1);

    // --- tensor primitives -------------------------------------------------
    let unary: Vec<(&str, Builder, f64, f64)> = vec![
        ("neg", Box::new(|_, t| weighted(&t.neg(), 1)), -1.0, 1.0),
        ("exp", Box::new(|_, t| weighted(&t.exp(), 2)), -1.0, 1.0),
        ("log", Box::new(|_, t| weighted(&t.log(), 3)), 0.4, 2.0),
        ("sqrt", Box::new(|_, t| weighted(&t.sqrt(), 4)), 0.4, 2.0),
        ("cosh", Box::new(|_, t| weighted(&t.cosh(), 5)), -1.0, 1.0),
        ("sinh", Box::new(|_, t| weighted(&t.sinh(), 6)), -1.0, 1.0),
        ("acosh", Box::new(|_, t| weighted(&t.acosh(), 7)), 1.2, 3.0),
        ("asin", Box::new(|_, t| weighted(&t.asin(), 8)), -0.8, 0.8),
        ("acos", Box::new(|_, t| weighted(&t.acos(), 9)), -0.8, 0.8),
        ("gelu", Box::new(|_, t| weighted(&t.gelu(), 10)), -1.5, 1.5),
        ("sinhc", Box::new(|_, t| weighted(&t.sinhc(), 11)), -1.0, 1.0),
        (
            "clamp",
            Box::new(|_, t| weighted(&t.clamp(Some(-2.0), Some(2.0)), 12)),
            -1.0,
            1.0,
        ),
        (
            "softmax_rows",
            Box::new(|_, t| weighted(&t.softmax_rows(), 13)),
            -1.0,
            1.0,
        ),
        (
            "log_softmax_rows",
            Box::new(|_, t| weighted(&t.log_softmax_rows(), 14)),
            -1.0,
            1.0,
        ),
        (
            "sum_rows",
            Box::new(|_, t| weighted(&t.sum_rows(), 15)),
            -1.0,
            1.0,
        ),
        (
            "row_norm",
            Box::new(|_, t| weighted(&t.row_norm(1e-12), 16)),
            0.3,
            1.5,
        ),
        (
            "transpose",
            Box::new(|_, t| weighted(&t.transpose(), 17)),
            -1.0,
            1.0,
        ),
        ("sum", Box::new(|_, t| Ok(t.sum())), -1.0, 1.0),
        ("mean", Box::new(|_, t| Ok(t.mean())), -1.0, 1.0),
        ("max", Box::new(|_, t| Ok(t.max_all())), -1.0, 1.0),
        (
            "gather_rows",
            Box::new(|_, t| weighted(&t.gather_rows(&[0, 2, 2, 1])?, 18)),
            -1.0,
            1.0,
        ),
        (
            "slice",
            Box::new(|_, t| {
                weighted(&concat(&[t.slice_rows(1, 2)?, t.slice_cols(0, 4)?.slice_rows(0, 2)?], 0)?, 19)
            }),
            -1.0,
            1.0,
        ),
        (
            "embedding_lookup",
            Box::new(|_, t| weighted(&embedding_lookup(t, &[2, 0, 2])?, 20)),
            -1.0,
            1.0,
        ),
    ];
    for (i, (name, builder, lo, hi)) in unary.into_iter().enumerate() {
        out.push(check(
            name,
            r.min(10),
            100 + i as u64,
            move |rng| raw(rng, &[3, 4], lo, hi),
            builder,
        ));
    }

    out.push(check(
        "matmul",
        r.min(10),
        200,
        |rng| raw(rng, &[3, 4], -1.0, 1.0),
        Box::new(|tape, t| {
            let mut rng = Rng::seed_from_u64(7);
            let b = tape.constant(raw(&mut rng, &[4, 2], -1.0, 1.0));
            let bt = tape.constant(raw(&mut rng, &[2, 4], -1.0, 1.0));
            weighted(&concat(&[t.matmul(&b)?, t.matmul_t(&bt)?], 1)?, 21)
        }),
    ));
    out.push(check(
        "binary_elementwise",
        r.min(10),
        201,
        |rng| raw(rng, &[3, 4], 0.5, 1.5),
        Box::new(|tape, t| {
            let mut rng = Rng::seed_from_u64(8);
            let full = tape.constant(raw(&mut rng, &[3, 4], 0.5, 1.5));
            let rowv = tape.constant(raw(&mut rng, &[1, 4], 0.5, 1.5));
            let colv = tape.constant(raw(&mut rng, &[3, 1], 0.5, 1.5));
            let s = tape.constant(raw(&mut rng, &[1], 0.5, 1.5));
            let mix = t
                .add(&full)?
                .sub(&rowv)?
                .mul(&colv)?
                .div(&s)?
                .add_const(0.3)
                .mul_const(1.7);
            weighted(&mix, 22)
        }),
    ));
    out.push(check(
        "layer_norm",
        r.min(10),
        202,
        |rng| raw(rng, &[3, 6], -1.0, 1.0),
        Box::new(|tape, t| {
            let mut rng = Rng::seed_from_u64(9);
            let g = tape.constant(raw(&mut rng, &[1, 6], 0.5, 1.5));
            let b = tape.constant(raw(&mut rng, &[1, 6], -0.5, 0.5));
            weighted(&layer_norm(t, &g, &b, 1e-5)?, 23)
        }),
    ));

    // --- geometry ----------------------------------------------------------
    let geometry: Vec<(&str, Builder)> = vec![
        (
            "lorentz_lift",
            Box::new(|tape, t| {
                let p = lift_rows(t, &tape.scalar(1.3))?;
                p.time.sum().add(&p.space.sum())
            }),
        ),
        (
            "lorentz_exp_map",
            Box::new(|tape, t| {
                let p = exp_map_rows(t, &tape.scalar(0.8))?;
                p.time.sum().add(&p.space.sum())
            }),
        ),
        (
            "lorentz_distance",
            Box::new(|tape, t| {
                let mut rng = Rng::seed_from_u64(10);
                let c = tape.scalar(1.1);
                let a = exp_map_rows(t, &c)?;
                let b = exp_map_rows(&tape.constant(raw(&mut rng, &[3, 4], -0.8, 0.8)), &c)?;
                Ok(distance_matrix(&a, &b, &c)?.sum())
            }),
        ),
        (
            "cone_half_aperture",
            Box::new(|tape, t| {
                let c = tape.scalar(1.0);
                let shifted = t.add_const(0.6);
                let p = lift_rows(&shifted, &c)?;
                Ok(half_aperture_rows(&p, &c, 0.1)?.0.sum())
            }),
        ),
        (
            "cone_violation",
            Box::new(|tape, t| {
                let mut rng = Rng::seed_from_u64(11);
                let c = tape.scalar(1.0);
                let apex_raw = raw(&mut rng, &[3, 4], 0.4, 1.2);
                let apex = lift_rows(&tape.constant(apex_raw), &c)?;
                let y = exp_map_rows(t, &c)?;
                Ok(cone_violation_diag(&apex, &y, &c, 0.1)?.0.sum())
            }),
        ),
    ];
    for (i, (name, builder)) in geometry.into_iter().enumerate() {
        out.push(check(
            name,
            r,
            300 + i as u64,
            |rng| raw(rng, &[3, 4], -0.9, 0.9),
            builder,
        ));
    }

    // --- losses at B = 4 ---------------------------------------------------
    let loss_reps = (r / 10).max(3);
    let losses: Vec<(&str, Builder)> = vec![
        (
            "loss_contrastive",
            Box::new(|tape, t| {
                let mut rng = Rng::seed_from_u64(12);
                let c = tape.scalar(1.2);
                let student = BatchOnTape {
                    images: exp_map_rows(t, &c)?,
                    texts: exp_map_rows(&tape.constant(raw(&mut rng, &[4, 3], -0.7, 0.7)), &c)?,
                };
                Ok(hyperbolic_contrastive_loss(&student, &tape.scalar(0.7), &c).unwrap())
            }),
        ),
        (
            "loss_distillation",
            Box::new(|tape, t| {
                let mut rng = Rng::seed_from_u64(13);
                let c = tape.scalar(1.2);
                let student = BatchOnTape {
                    images: exp_map_rows(t, &c)?,
                    texts: exp_map_rows(&tape.constant(raw(&mut rng, &[4, 3], -0.7, 0.7)), &c)?,
                };
                let teacher = BatchOnTape {
                    images: exp_map_rows(&tape.constant(raw(&mut rng, &[4, 3], -0.7, 0.7)), &c)?,
                    texts: exp_map_rows(&tape.constant(raw(&mut rng, &[4, 3], -0.7, 0.7)), &c)?,
                };
                Ok(
                    interaction_distillation_loss(&student, &teacher, &tape.scalar(0.7), &c)
                        .unwrap()
                        .loss,
                )
            }),
        ),
        (
            "loss_entailment",
            Box::new(|tape, t| {
                let mut rng = Rng::seed_from_u64(14);
                let c = tape.scalar(1.0);
                let texts_raw = raw(&mut rng, &[4, 3], 0.3, 1.0);
                let student = BatchOnTape {
                    images: exp_map_rows(t, &c)?,
                    texts: lift_rows(&tape.constant(texts_raw), &c)?,
                };
                Ok(entailment_loss(&student, &c, 0.1).unwrap().0)
            }),
        ),
        (
            "loss_total",
            Box::new(|tape, t| {
                let mut rng = Rng::seed_from_u64(15);
                let c = tape.scalar(1.1);
                let student = BatchOnTape {
                    images: exp_map_rows(t, &c)?,
                    texts: exp_map_rows(&tape.constant(raw(&mut rng, &[4, 3], -0.7, 0.7)), &c)?,
                };
                let teacher = BatchOnTape {
                    images: exp_map_rows(&tape.constant(raw(&mut rng, &[4, 3], -0.7, 0.7)), &c)?,
                    texts: exp_map_rows(&tape.constant(raw(&mut rng, &[4, 3], -0.7, 0.7)), &c)?,
                };
                let (total, _) = total_loss(
                    &student,
                    Some(&teacher),
                    &tape.scalar(0.7),
                    &c,
                    0.1,
                    &LossWeights::default(),
                )
                .unwrap();
                Ok(total)
            }),
        ),
        (
            "loss_euclidean_clip",
            Box::new(|tape, t| {
                let mut rng = Rng::seed_from_u64(16);
                let txt = tape.constant(raw(&mut rng, &[4, 3], -0.9, 0.9));
                Ok(euclidean_clip_loss(t, &txt, &tape.scalar(0.7)).unwrap())
            }),
        ),
    ];
    for (i, (name, builder)) in losses.into_iter().enumerate() {
        out.push(check(
            name,
            loss_reps,
            400 + i as u64,
            |rng| raw(rng, &[4, 3], -0.7, 0.7),
            builder,
        ));
    }

    out
}
