use super::Matrix;

/// Visits every trainable tensor of a model in a fixed order.
///
/// Gradients are stored in a value of the same type, so optimizers and
/// gradient checkers can walk parameters and gradients in lockstep.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Params for Matrix {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(prefix, self)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(prefix, self)
    }
}

pub fn num_params<P: Params + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, m| n += m.len());
    n
}

pub fn param_names<P: Params + ?Sized>(p: &P) -> Vec<String> {
    let mut names = Vec::new();
    p.visit("", &mut |name, _| names.push(name.to_string()));
    names
}

pub fn flatten<P: Params + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::with_capacity(num_params(p));
    p.visit("", &mut |_, m| out.extend_from_slice(m.as_slice()));
    out
}

pub fn assign_flat<P: Params + ?Sized>(p: &mut P, values: &[f64]) {
    let mut offset = 0;
    p.visit_mut("", &mut |_, m| {
        let n = m.len();
        m.as_mut_slice().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    });
    assert_eq!(offset, values.len(), "flat parameter length mismatch");
}

pub fn zeros_like<P: Params + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.visit_mut("", &mut |_, m| m.fill(0.0));
    z
}

/// `acc += scale * g`, tensor by tensor.
pub fn accumulate<P: Params + ?Sized>(acc: &mut P, g: &P, scale: f64) {
    let flat = flatten(g);
    let mut offset = 0;
    acc.visit_mut("", &mut |_, m| {
        let n = m.len();
        for (a, b) in m.as_mut_slice().iter_mut().zip(&flat[offset..offset + n]) {
            *a += scale * b;
        }
        offset += n;
    });
}

pub fn scale_all<P: Params + ?Sized>(p: &mut P, s: f64) {
    p.visit_mut("", &mut |_, m| m.scale(s));
}

pub fn global_norm<P: Params + ?Sized>(p: &P) -> f64 {
    let mut s = 0.0;
    p.visit("", &mut |_, m| s += m.sum_squares());
    s.sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_global_norm<P: Params + ?Sized>(g: &mut P, max_norm: f64) -> f64 {
    let n = global_norm(g);
    if n > max_norm && n > 0.0 {
        scale_all(g, max_norm / n);
    }
    n
}

/// A pair of parameter sets trained jointly.
#[derive(Clone, Debug)]
pub struct Joint<A, B>(pub A, pub B);

impl<A: Params, B: Params> Params for Joint<A, B> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        self.0.visit(&join(prefix, "0"), f);
        self.1.visit(&join(prefix, "1"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.0.visit_mut(&join(prefix, "0"), f);
        self.1.visit_mut(&join(prefix, "1"), f);
    }
}
