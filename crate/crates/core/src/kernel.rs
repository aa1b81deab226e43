//! Compact smoothing kernels of known order.
//!
//! A kernel `K` here is zero outside `[-κ, κ]`, integrates to one, and has
//! vanishing moments `∫ sⁱ K(s) ds = 0` for `i = 1..k`. The estimator only
//! ever evaluates the bandwidth-scaled form
//!
//! ```text
//! K_h(v) = K(v / h) / h,     h > 0,
//! ```
//!
//! so `K_h` vanishes for `|v| > κ·h`. The built-in kernel is the biweight
//! `K(x) = 15/16 (1 - x²)² 1{|x| ≤ 1}` with `κ = 1`, `k = 2`. Custom kernels
//! are accepted but must pass the moment checks at registration.

use std::fmt;
use std::sync::Arc;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::quadrature::{adaptive_simpson, composite_simpson};

/// A compact kernel with verified order, generic over the scalar type.
///
/// `∫K²` is computed once at construction and cached; it enters the
/// dyad-level variance component.
#[derive(Clone)]
pub struct KernelSpec<F: Float> {
    name: String,
    support: F,
    order: u32,
    form: KernelForm<F>,
    square_integral: F,
}

#[derive(Clone)]
enum KernelForm<F> {
    Biweight,
    Custom(Arc<dyn Fn(F) -> F + Send + Sync>),
}

impl<F: Float> fmt::Debug for KernelSpec<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelSpec")
            .field("name", &self.name)
            .field("support", &self.support.to_f64())
            .field("order", &self.order)
            .finish()
    }
}

/// Moment report from [`KernelSpec::verify_order`].
///
/// `moments[i]` is `∫ sⁱ K(s) ds` for `i = 0..=k+1`; the `k+1`-st moment is
/// reported because it scales the leading smoothing-bias term. A kernel of
/// order `k` integrates to one and has vanishing moments `1..k-1` (the
/// usual higher-order-kernel convention: the biweight is order 2 with
/// `∫s²K = 1/7 ≠ 0`).
#[derive(Debug, Clone)]
pub struct KernelOrderReport<F> {
    pub name: String,
    pub order: u32,
    pub moments: Vec<F>,
    pub tol: F,
    pub pass: bool,
}

impl<F: Float> KernelSpec<F> {
    /// The biweight kernel `15/16 (1 - x²)²` on `[-1, 1]`, order 2.
    pub fn biweight() -> Self {
        let mut spec = KernelSpec {
            name: "biweight".to_string(),
            support: F::one(),
            order: 2,
            form: KernelForm::Biweight,
            square_integral: F::zero(),
        };
        spec.square_integral = spec.compute_square_integral();
        spec
    }

    /// Register a user kernel. Fails unless the moment conditions hold at
    /// tolerance `tol`: `|∫K - 1| ≤ tol` and `|∫sⁱK| ≤ tol` for `i < k`.
    pub fn custom<G>(name: &str, support: F, order: u32, eval: G, tol: F) -> Result<Self>
    where
        G: Fn(F) -> F + Send + Sync + 'static,
    {
        if support <= F::zero() {
            return Err(Error::Config(format!("kernel '{name}': support must be positive")));
        }
        if order < 2 {
            return Err(Error::Config(format!("kernel '{name}': order must be at least 2")));
        }
        let mut spec = KernelSpec {
            name: name.to_string(),
            support,
            order,
            form: KernelForm::Custom(Arc::new(eval)),
            square_integral: F::zero(),
        };
        let report = spec.verify_order(tol);
        if !report.pass {
            let shown: Vec<f64> =
                report.moments.iter().map(|m| m.to_f64().unwrap_or(f64::NAN)).collect();
            return Err(Error::KernelOrder {
                name: name.to_string(),
                detail: format!("moments 0..={} were {:?}", order + 1, shown),
            });
        }
        spec.square_integral = spec.compute_square_integral();
        Ok(spec)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Support radius κ: the kernel vanishes for `|x| > κ`.
    pub fn support(&self) -> F {
        self.support
    }

    /// Kernel order `k` (vanishing moments `1..k`).
    pub fn order(&self) -> u32 {
        self.order
    }

    /// Cached `∫ K²(s) ds`.
    pub fn square_integral(&self) -> F {
        self.square_integral
    }

    /// Evaluate `K(x)`; zero outside the support.
    pub fn eval(&self, x: F) -> F {
        if x.abs() > self.support {
            return F::zero();
        }
        match &self.form {
            KernelForm::Biweight => {
                let c = F::from(15.0 / 16.0).unwrap();
                let u = F::one() - x * x;
                c * u * u
            }
            KernelForm::Custom(f) => f(x),
        }
    }

    /// Bandwidth-scaled evaluation `K_h(v) = K(v/h)/h`.
    pub fn scaled(&self, h: F, v: F) -> Result<F> {
        if h <= F::zero() {
            return Err(Error::Config("bandwidth must be positive".to_string()));
        }
        Ok(self.eval(v / h) / h)
    }

    /// Compute moments `0..=k+1` by adaptive quadrature and check the order
    /// conditions at tolerance `tol`.
    pub fn verify_order(&self, tol: F) -> KernelOrderReport<F> {
        let quad_tol = Self::quad_tol(tol);
        let kappa = self.support;
        let mut moments = Vec::with_capacity(self.order as usize + 2);
        for i in 0..=(self.order + 1) {
            let val = adaptive_simpson(
                |s: F| s.powi(i as i32) * self.eval(s),
                -kappa,
                kappa,
                quad_tol,
            );
            moments.push(val);
        }
        let mut pass = (moments[0] - F::one()).abs() <= tol;
        for m in moments.iter().take(self.order as usize).skip(1) {
            pass = pass && m.abs() <= tol;
        }
        KernelOrderReport {
            name: self.name.clone(),
            order: self.order,
            moments,
            tol,
            pass,
        }
    }

    /// `∫K²` by composite Simpson with `panels` subintervals; used to check
    /// stability under grid refinement.
    pub fn square_integral_on_grid(&self, panels: usize) -> F {
        let kappa = self.support;
        composite_simpson(
            |s: F| {
                let v = self.eval(s);
                v * v
            },
            -kappa,
            kappa,
            panels,
        )
    }

    fn compute_square_integral(&self) -> F {
        let kappa = self.support;
        adaptive_simpson(
            |s: F| {
                let v = self.eval(s);
                v * v
            },
            -kappa,
            kappa,
            Self::quad_tol(F::from(1e-10).unwrap()),
        )
    }

    fn quad_tol(tol: F) -> F {
        let hundredth = tol / F::from(100.0).unwrap();
        let eps_floor = F::epsilon() * F::from(100.0).unwrap();
        if hundredth > eps_floor {
            hundredth
        } else {
            eps_floor
        }
    }
}

/// A kernel paired with a validated bandwidth, for hot loops.
#[derive(Debug, Clone)]
pub struct ScaledKernel<'a, F: Float> {
    spec: &'a KernelSpec<F>,
    h: F,
}

impl<'a, F: Float> ScaledKernel<'a, F> {
    pub fn new(spec: &'a KernelSpec<F>, h: F) -> Result<Self> {
        if h <= F::zero() || !h.is_finite() {
            return Err(Error::Config(format!(
                "bandwidth must be positive and finite, got {}",
                h.to_f64().unwrap_or(f64::NAN)
            )));
        }
        Ok(ScaledKernel { spec, h })
    }

    pub fn bandwidth(&self) -> F {
        self.h
    }

    /// `K_h(v) = K(v/h)/h`.
    pub fn weight(&self, v: F) -> F {
        self.spec.eval(v / self.h) / self.h
    }

    /// True when `v` lies inside the scaled support `|v| ≤ κ·h`.
    pub fn in_support(&self, v: F) -> bool {
        v.abs() <= self.spec.support * self.h
    }
}
