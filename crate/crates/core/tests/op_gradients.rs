//! Central-difference checks of every tape op's backward rule.

use std::sync::Arc;

use hanme_core::engine::{finite_diff_check, Axis, GradCheckOptions, Tape, Var};
use hanme_core::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::random_uniform(rows, cols, -1.5, 1.5, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Max relative gradient error of `sum(build(inputs) * w)` for a fixed
/// random `w`, so that ops whose plain sum is constant are still covered.
fn op_error(shapes: &[(usize, usize)], build: &Build<'_>) -> f64 {
    let inputs: Vec<Tensor> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| random(r, c, 100 + i as u64))
        .collect();
    let objective = |values: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::strict();
        let vars: Vec<Var> = values.iter().map(|v| tape.input(v.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let (r, c) = tape.shape(out);
        let w = tape.constant(random(r, c, 7));
        let weighted = tape.mul(out, w)?;
        let loss = tape.sum(weighted);
        let grads = tape.backward(loss)?;
        let g = vars
            .iter()
            .zip(values)
            .map(|(&v, x)| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()))
            })
            .collect();
        Ok((tape.value(loss).item(), g))
    };
    finite_diff_check(objective, &inputs, GradCheckOptions::default())
        .unwrap()
        .max_rel_error
}

fn assert_op(name: &str, shapes: &[(usize, usize)], build: &Build<'_>) {
    let err = op_error(shapes, build);
    assert!(err < 1e-6, "{name}: max relative error {err:e}");
}

#[test]
fn elementwise_ops() {
    assert_op("add", &[(3, 4), (3, 4)], &|t, v| t.add(v[0], v[1]));
    assert_op("mul", &[(3, 4), (3, 4)], &|t, v| t.mul(v[0], v[1]));
    assert_op("add_row", &[(3, 4), (1, 4)], &|t, v| t.add_row(v[0], v[1]));
    assert_op("mul_col", &[(3, 4), (3, 1)], &|t, v| t.mul_col(v[0], v[1]));
    assert_op("mul_scalar", &[(3, 4), (1, 1)], &|t, v| t.mul_scalar(v[0], v[1]));
    assert_op("scale", &[(3, 4)], &|t, v| Ok(t.scale(v[0], -2.5)));
    assert_op("sigmoid", &[(3, 4)], &|t, v| Ok(t.sigmoid(v[0])));
    assert_op("tanh", &[(3, 4)], &|t, v| Ok(t.tanh(v[0])));
    assert_op("leaky_relu", &[(3, 4)], &|t, v| Ok(t.leaky_relu(v[0], 0.2)));
    assert_op("elu", &[(3, 4)], &|t, v| Ok(t.elu(v[0])));
    assert_op("exp", &[(3, 4)], &|t, v| Ok(t.exp(v[0])));
}

#[test]
fn matrix_ops() {
    assert_op("matmul", &[(3, 5), (5, 2)], &|t, v| t.matmul(v[0], v[1]));
    assert_op("row_dot", &[(4, 3), (4, 3)], &|t, v| t.row_dot(v[0], v[1]));
    assert_op("row_sum", &[(4, 3)], &|t, v| Ok(t.row_sum(v[0])));
    assert_op("sum", &[(4, 3)], &|t, v| Ok(t.sum(v[0])));
    assert_op("select", &[(4, 3)], &|t, v| t.select(v[0], 2, 1));
    assert_op("mean_rows", &[(4, 3)], &|t, v| t.mean_rows(v[0], None));
    assert_op("mean_rows subset", &[(5, 3)], &|t, v| {
        t.mean_rows(v[0], Some(Arc::from(vec![0, 3, 4])))
    });
}

#[test]
fn softmax_ops() {
    assert_op("softmax rows", &[(3, 4)], &|t, v| Ok(t.softmax(v[0], Axis::Row)));
    assert_op("softmax cols", &[(3, 4)], &|t, v| Ok(t.softmax(v[0], Axis::Col)));
    assert_op("segment_softmax", &[(6, 1)], &|t, v| {
        t.segment_softmax(v[0], Arc::from(vec![0, 0, 1, 2, 2, 2]))
    });
}

#[test]
fn structural_ops() {
    assert_op("concat_cols", &[(3, 2), (3, 4)], &|t, v| t.concat_cols(&[v[0], v[1]]));
    assert_op("concat_rows", &[(2, 3), (4, 3)], &|t, v| t.concat_rows(&[v[0], v[1]]));
    assert_op("slice_cols", &[(3, 5)], &|t, v| t.slice_cols(v[0], 1, 3));
    assert_op("slice_rows", &[(5, 3)], &|t, v| t.slice_rows(v[0], 2, 2));
    assert_op("gather_rows", &[(4, 3)], &|t, v| t.gather_rows(v[0], Arc::from(vec![3, 0, 3, 1])));
    assert_op("segment_sum", &[(5, 2)], &|t, v| {
        t.segment_sum(v[0], Arc::from(vec![1, 0, 1, 2, 1]), 4)
    });
}

#[test]
fn stochastic_and_loss_ops() {
    assert_op("dropout", &[(4, 5)], &|t, v| {
        t.dropout(v[0], 0.4, true, &mut ChaCha8Rng::seed_from_u64(3))
    });
    let targets = Arc::new(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap());
    assert_op("bce_with_logits", &[(3, 2)], &|t, v| t.bce_with_logits(v[0], targets.clone()));
}

#[test]
fn concat_keeps_gradients_apart() {
    let mut tape = Tape::strict();
    let a = tape.input(random(2, 2, 1));
    let b = tape.input(random(2, 3, 2));
    let joined = tape.concat_cols(&[a, b]).unwrap();
    let right = tape.slice_cols(joined, 2, 3).unwrap();
    let loss = tape.sum(right);
    let grads = tape.backward(loss).unwrap();
    let ga = grads.get(a).cloned().unwrap_or_else(|| Tensor::zeros(2, 2));
    assert!(ga.data().iter().all(|&x| x == 0.0));
    assert!(grads.get(b).unwrap().data().iter().all(|&x| x == 1.0));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut tape = Tape::strict();
    let x = tape.input(random(5, 7, 4).map(|v| 40.0 * v));
    let s = tape.softmax(x, Axis::Row);
    let out = tape.value(s);
    for r in 0..out.rows() {
        let total: f64 = out.row(r).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn dropout_outside_training_is_identity() {
    let mut tape = Tape::strict();
    let value = random(3, 3, 5);
    let x = tape.input(value.clone());
    let y = tape
        .dropout(x, 0.6, false, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    assert_eq!(tape.value(y), &value);
}
