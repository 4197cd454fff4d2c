use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// How the right operand of a binary op lines up with the left.
#[derive(Clone, Copy, Debug)]
enum Pairing {
    Same,
    /// One side is a single element.
    LhsScalar,
    RhsScalar,
    /// Right shape equals the trailing dims of the left (bias-style); the
    /// right operand repeats every `inner` elements.
    RhsSuffix { inner: usize },
}

fn pairing(op: &'static str, a: &[usize], b: &[usize], na: usize, nb: usize) -> Result<Pairing> {
    if a == b {
        return Ok(Pairing::Same);
    }
    if nb == 1 {
        return Ok(Pairing::RhsScalar);
    }
    if na == 1 {
        return Ok(Pairing::LhsScalar);
    }
    if b.len() < a.len() && a[a.len() - b.len()..] == *b {
        return Ok(Pairing::RhsSuffix { inner: nb });
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

fn binary<T, F, DA, DB>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>, f: F, da: DA, db: DB) -> Result<Tensor<T>>
where
    T: Real,
    F: Fn(T, T) -> T,
    DA: Fn(T, T) -> T + Send + Sync + 'static,
    DB: Fn(T, T) -> T + Send + Sync + 'static,
{
    let mode = pairing(op, a.shape(), b.shape(), a.numel(), b.numel())?;
    let (ad, bd) = (a.data(), b.data());
    let (shape, out): (Vec<usize>, Vec<T>) = match mode {
        Pairing::Same => (a.shape().to_vec(), ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()),
        Pairing::RhsScalar => {
            let y = bd[0];
            (a.shape().to_vec(), ad.iter().map(|&x| f(x, y)).collect())
        }
        Pairing::LhsScalar => {
            let x = ad[0];
            (b.shape().to_vec(), bd.iter().map(|&y| f(x, y)).collect())
        }
        Pairing::RhsSuffix { inner } => {
            let mut out = Vec::with_capacity(ad.len());
            for chunk in ad.chunks(inner) {
                out.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
            }
            (a.shape().to_vec(), out)
        }
    };
    let (aa, ba) = (a.data_arc(), b.data_arc());
    let (na, nb) = (a.numel(), b.numel());
    Tensor::from_op(op, &[a, b], shape, out, move |g, needs| {
        let ga = needs[0].then(|| match mode {
            Pairing::Same => g.iter().zip(aa.iter().zip(ba.iter())).map(|(&gi, (&x, &y))| gi * da(x, y)).collect(),
            Pairing::RhsScalar => g.iter().zip(aa.iter()).map(|(&gi, &x)| gi * da(x, ba[0])).collect(),
            Pairing::LhsScalar => vec![g.iter().zip(ba.iter()).map(|(&gi, &y)| gi * da(aa[0], y)).sum()],
            Pairing::RhsSuffix { inner } => {
                let mut ga = Vec::with_capacity(na);
                for (gc, ac) in g.chunks(inner).zip(aa.chunks(inner)) {
                    ga.extend(gc.iter().zip(ac.iter().zip(ba.iter())).map(|(&gi, (&x, &y))| gi * da(x, y)));
                }
                ga
            }
        });
        let gb = needs[1].then(|| match mode {
            Pairing::Same => g.iter().zip(aa.iter().zip(ba.iter())).map(|(&gi, (&x, &y))| gi * db(x, y)).collect(),
            Pairing::RhsScalar => vec![g.iter().zip(aa.iter()).map(|(&gi, &x)| gi * db(x, ba[0])).sum()],
            Pairing::LhsScalar => g.iter().zip(ba.iter()).map(|(&gi, &y)| gi * db(aa[0], y)).collect(),
            Pairing::RhsSuffix { inner } => {
                let mut gb = vec![T::zero(); nb];
                for (gc, ac) in g.chunks(inner).zip(aa.chunks(inner)) {
                    for ((acc, &gi), (&x, &y)) in gb.iter_mut().zip(gc).zip(ac.iter().zip(ba.iter())) {
                        *acc += gi * db(x, y);
                    }
                }
                gb
            }
        });
        vec![ga, gb]
    })
}

fn unary<T, F, D>(op: &'static str, x: &Tensor<T>, f: F, d: D) -> Result<Tensor<T>>
where
    T: Real,
    F: Fn(T) -> T,
    D: Fn(T, T) -> T + Send + Sync + 'static,
{
    let out: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
    let xa = x.data_arc();
    let ya = std::sync::Arc::new(out.clone());
    Tensor::from_op(op, &[x], x.shape().to_vec(), out, move |g, needs| {
        vec![needs[0].then(|| {
            g.iter()
                .zip(xa.iter().zip(ya.iter()))
                .map(|(&gi, (&xi, &yi))| gi * d(xi, yi))
                .collect()
        })]
    })
}

pub(crate) fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus_scalar<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

impl<T: Real> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary("add", self, rhs, |x, y| x + y, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary("sub", self, rhs, |x, y| x - y, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary("mul", self, rhs, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if rhs.data().iter().any(|v| *v == T::zero()) {
            return Err(TensorError::DivisionByZero("div"));
        }
        binary("div", self, rhs, |x, y| x / y, |_, y| T::one() / y, |x, y| -x / (y * y))
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        unary("neg", self, |v| -v, |_, _| -T::one())
    }

    pub fn scale(&self, c: T) -> Result<Tensor<T>> {
        unary("scale", self, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: T) -> Result<Tensor<T>> {
        unary("add_scalar", self, move |v| v + c, |_, _| T::one())
    }

    pub fn square(&self) -> Result<Tensor<T>> {
        unary("square", self, |v| v * v, |x, _| x + x)
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        unary("exp", self, |v| v.exp(), |_, y| y)
    }

    pub fn log(&self) -> Result<Tensor<T>> {
        if let Some(v) = self.data().iter().find(|v| **v < T::zero()) {
            return Err(TensorError::NegativeInput {
                op: "log",
                value: v.as_f64(),
            });
        }
        unary("log", self, |v| v.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(&self) -> Result<Tensor<T>> {
        if let Some(v) = self.data().iter().find(|v| **v < T::zero()) {
            return Err(TensorError::NegativeInput {
                op: "sqrt",
                value: v.as_f64(),
            });
        }
        unary("sqrt", self, |v| v.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn sin(&self) -> Result<Tensor<T>> {
        unary("sin", self, |v| v.sin(), |x, _| x.cos())
    }

    pub fn cos(&self) -> Result<Tensor<T>> {
        unary("cos", self, |v| v.cos(), |x, _| -x.sin())
    }

    pub fn tanh(&self) -> Result<Tensor<T>> {
        unary("tanh", self, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        unary("sigmoid", self, sigmoid_scalar, |_, y| y * (T::one() - y))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&self) -> Result<Tensor<T>> {
        unary("softplus", self, softplus_scalar, |x, _| sigmoid_scalar(x))
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        unary(
            "relu",
            self,
            |v| v.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }
}
