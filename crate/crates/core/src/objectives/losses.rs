use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Logit added to self-similarities so they drop out of the softmax.
const SELF_MASK: f64 = -1e9;

/// NT-Xent over the `2B` embeddings `[z1; z2]`, positives at `(i, i + B)`.
pub fn nt_xent<T: Scalar>(g: &mut Graph<T>, z1: Var, z2: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::arg(format!("temperature must be > 0, got {temperature}")));
    }
    let (s1, s2) = (g.shape(z1).to_vec(), g.shape(z2).to_vec());
    if s1.len() != 2 || s1 != s2 {
        return Err(Error::shape("nt_xent", &s1, &s2));
    }
    let b = s1[0];
    if b < 2 {
        return Err(Error::arg(format!("nt_xent needs a batch of at least 2 pairs (no negatives otherwise), got {b}")));
    }
    let z = g.concat(&[z1, z2], 0)?;
    let z = g.l2_normalize(z)?;
    let sim = g.matmul_ex(z, z, false, true)?;
    let logits = g.scale(sim, T::lit(1.0 / temperature));
    let n = 2 * b;
    let mask = Tensor::from_fn(&[n, n], |i| if i / n == i % n { T::lit(SELF_MASK) } else { T::zero() });
    let mask = g.constant(mask);
    let logits = g.add(logits, mask)?;
    let targets: Vec<usize> = (0..n).map(|i| (i + b) % n).collect();
    g.softmax_cross_entropy(logits, &targets)
}

fn check_nonzero_rows<T: Scalar>(g: &Graph<T>, v: Var, what: &str) -> Result<()> {
    let t = g.value(v);
    let d = *t.shape().last().unwrap_or(&0);
    if d == 0 {
        return Err(Error::arg(format!("{what} is empty")));
    }
    for (i, row) in t.data().chunks(d).enumerate() {
        if row.iter().all(|x| *x == T::zero()) {
            return Err(Error::arg(format!("{what} row {i} is the zero vector; cosine is undefined")));
        }
    }
    Ok(())
}

fn mean_cosine<T: Scalar>(g: &mut Graph<T>, p: Var, z: Var) -> Result<Var> {
    let pn = g.l2_normalize(p)?;
    let zn = g.l2_normalize(z)?;
    let prod = g.mul(pn, zn)?;
    let cos = g.row_sum(prod)?;
    Ok(g.mean(cos))
}

/// `-(cos(p1, sg(z2)) + cos(p2, sg(z1))) / 2`, batch-averaged. The `z`
/// inputs are detached here, so no gradient reaches them.
pub fn simsiam_loss<T: Scalar>(g: &mut Graph<T>, p1: Var, z2: Var, p2: Var, z1: Var) -> Result<Var> {
    let shape = g.shape(p1).to_vec();
    for v in [z2, p2, z1] {
        if g.shape(v) != shape.as_slice() {
            return Err(Error::shape("simsiam_loss", &shape, g.shape(v)));
        }
    }
    for (v, name) in [(p1, "p1"), (z2, "z2"), (p2, "p2"), (z1, "z1")] {
        check_nonzero_rows(g, v, name)?;
    }
    let z1 = g.detach(z1);
    let z2 = g.detach(z2);
    let a = mean_cosine(g, p1, z2)?;
    let b = mean_cosine(g, p2, z1)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, T::lit(-0.5)))
}

/// Binary cross-entropy summed over augmentations and averaged over the
/// batch. Labels must be exactly 0 or 1.
pub fn mlap_from_logits<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &Tensor<T>) -> Result<Var> {
    if let Some(bad) = labels.data().iter().find(|&&y| y != T::zero() && y != T::one()) {
        return Err(Error::arg(format!("augmentation label {bad} is not 0 or 1")));
    }
    g.bce_with_logits(logits, labels)
}

/// `c + lambda * m` inside the graph.
pub fn combine_losses<T: Scalar>(g: &mut Graph<T>, contrastive: Var, mlap: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::arg(format!("lambda must be >= 0, got {lambda}")));
    }
    let weighted = g.scale(mlap, T::lit(lambda));
    g.add(contrastive, weighted)
}
