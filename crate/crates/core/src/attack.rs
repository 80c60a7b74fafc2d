//! Adversarial restoration (perturbing the final-step noise prediction) and
//! the pixel-space FIM and DFANet-style baselines.

use restore_autodiff::{ClampGrad, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_update, DdimCoefficients};
use crate::error::{invalid, Error, Result};
use crate::facerec::{normalize_phi, sign, DropoutSurrogate, Embedder, EmbeddingModel};
use crate::rldm::{Restoration, Rldm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Fim,
    Dfanet,
    AdvrestoreFim,
    AdvrestoreDfanet,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::Fim, Self::AdvrestoreFim, Self::Dfanet, Self::AdvrestoreDfanet];

    /// Row label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Self::Fim => "FIM",
            Self::AdvrestoreFim => "FIM+AdvRestore",
            Self::Dfanet => "DFANet",
            Self::AdvrestoreDfanet => "DFANet+AdvRestore",
        }
    }

    pub fn flag(self) -> &'static str {
        match self {
            Self::Fim => "fim",
            Self::Dfanet => "dfanet",
            Self::AdvrestoreFim => "advrestore-fim",
            Self::AdvrestoreDfanet => "advrestore-dfanet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.flag() == s)
            .ok_or_else(|| invalid("variant", format!("unknown attack variant {s:?}")))
    }

    pub fn is_advrestore(self) -> bool {
        matches!(self, Self::AdvrestoreFim | Self::AdvrestoreDfanet)
    }

    pub fn uses_dropout(self) -> bool {
        matches!(self, Self::Dfanet | Self::AdvrestoreDfanet)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetGradient {
    StraightThrough,
    Exact,
}

impl From<BudgetGradient> for ClampGrad {
    fn from(b: BudgetGradient) -> Self {
        match b {
            BudgetGradient::StraightThrough => ClampGrad::StraightThrough,
            BudgetGradient::Exact => ClampGrad::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Sign-step size.
    pub beta: f64,
    pub n_max: usize,
    /// L∞ budget on the `[0, 1]` pixel scale.
    pub rho: f64,
    pub seed: u64,
    pub variant: Variant,
    /// Feature-map drop probability of the DFANet variants.
    pub dropout: f64,
    /// Gradient used through the budget clamp of the restoration attack.
    pub budget_gradient: BudgetGradient,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            beta: 1.0 / 255.0,
            n_max: 200,
            rho: 8.0 / 255.0,
            seed: 0,
            variant: Variant::AdvrestoreFim,
            dropout: 0.1,
            budget_gradient: BudgetGradient::Exact,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(invalid(
                "attack_config",
                format!("beta {} must be non-negative", self.beta),
            ));
        }
        if self.n_max == 0 {
            return Err(invalid("attack_config", "n_max must be at least 1"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(invalid("attack_config", format!("rho {} outside (0, 1)", self.rho)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(
                "attack_config",
                format!("dropout {} outside [0, 1)", self.dropout),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub variant: Variant,
    pub x_adv: Tensor,
    /// Clip anchor: the restoration `x̄` or the attacker image.
    pub x_ref: Tensor,
    /// Attack loss at every iteration, before its update.
    pub loss_trace: Vec<f64>,
    /// Clean-surrogate distance to the target after `i` updates;
    /// one entry longer than `loss_trace`.
    pub distance_trace: Vec<f64>,
    pub iterations_run: usize,
    /// `max |x_adv − x_ref|`.
    pub budget_linf: f64,
}

/// Elementwise clamp to `[anchor − rho, anchor + rho] ∩ [0, 1]`.
pub fn clip_budget(y: &Tensor, anchor: &Tensor, rho: f64) -> Result<Tensor> {
    if y.shape() != anchor.shape() {
        return Err(invalid(
            "clip_budget",
            format!("shape mismatch {:?} vs {:?}", y.shape(), anchor.shape()),
        ));
    }
    Ok(y.zip_map(anchor, "clip_budget", |v, a| v.clamp(a - rho, a + rho).clamp(0.0, 1.0))?)
}

/// `‖φ(F(x)) − target‖²` as a graph node; `target` is already normalised and
/// `x` is a `[1, 1, H, W]` batch.
fn loss_var(g: &mut Graph, surrogate: &dyn Embedder, x: Var, target: &Tensor) -> Result<Var> {
    let e = surrogate.embed_var(g, x)?;
    let e = g.l2_normalize(e)?;
    let t = g.constant(target.reshape(&[1, target.len()])?);
    let d = g.sub(e, t)?;
    let sq = g.mul(d, d)?;
    Ok(g.sum(sq))
}

/// Normalised surrogate embedding of a `[1, H, W]` image.
pub fn target_embedding(surrogate: &dyn Embedder, x_t: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(x_t.unsqueeze0());
    let e = surrogate.embed_var(&mut g, x)?;
    let e = g.value(e).index_outer(0)?;
    normalize_phi(&e)
}

/// The attack loss `‖φ(F(x_adv)) − φ(F(x_t))‖²`.
pub fn adv_loss(surrogate: &dyn Embedder, x_adv: &Tensor, x_t: &Tensor) -> Result<f64> {
    let target = target_embedding(surrogate, x_t)?;
    let mut g = Graph::new();
    let x = g.constant(x_adv.unsqueeze0());
    let l = loss_var(&mut g, surrogate, x, &target)?;
    Ok(g.value(l).data()[0])
}

/// Clean-surrogate distance of a `[1, H, W]` image to a normalised target.
pub fn distance_to_target(surrogate: &dyn Embedder, x: &Tensor, target: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.unsqueeze0());
    let l = loss_var(&mut g, surrogate, xv, target)?;
    Ok(g.value(l).data()[0])
}

fn batch_shape(img: &Tensor) -> Vec<usize> {
    std::iter::once(1).chain(img.shape().iter().copied()).collect()
}

/// The restoration attack objective as a function of the final-step noise
/// prediction `ε`: `‖φ(F(Clip(Dec(ℋ(ε, z_last))))) − φ(F(x_t))‖²`.
///
/// The budget box `[x̄ − ρ, x̄ + ρ]` uses the configured clamp gradient; the
/// valid pixel range `[0, 1]` is always differentiated exactly.
pub struct FinalStepObjective<'a> {
    rldm: &'a Rldm,
    z_last: Tensor,
    alpha_bars: (f64, f64),
    coeffs: DdimCoefficients,
    noise: Option<Tensor>,
    anchor: Tensor,
    rho: f64,
    lo: Tensor,
    hi: Tensor,
    target: Tensor,
    mode: ClampGrad,
}

impl<'a> FinalStepObjective<'a> {
    /// Objective resuming `restoration`'s final reverse step, anchored at the
    /// restored image.
    pub fn from_restoration(
        rldm: &'a Rldm,
        restoration: &Restoration,
        rho: f64,
        target: Tensor,
        mode: ClampGrad,
    ) -> Result<Self> {
        let (r, r_prev) = restoration.final_step;
        let sched = rldm.schedule();
        let alpha_bars = (sched.alpha_bar(r), sched.alpha_bar(r_prev));
        let coeffs = DdimCoefficients::new(alpha_bars.0, alpha_bars.1)?;
        let noise = restoration.final_noise.clone();
        if coeffs.sigma > 0.0 && noise.is_none() {
            return Err(invalid("advrestore_attack", "stochastic final step without its noise"));
        }
        let anchor = restoration.image.clone();
        let shape = batch_shape(&anchor);
        Ok(Self {
            rldm,
            z_last: restoration.z_last.clone(),
            alpha_bars,
            coeffs,
            noise,
            lo: anchor.map(|a| a - rho).reshape(&shape)?,
            hi: anchor.map(|a| a + rho).reshape(&shape)?,
            anchor,
            rho,
            target,
            mode,
        })
    }

    pub fn anchor(&self) -> &Tensor {
        &self.anchor
    }

    /// `ℋ(ε, z_last)`, computed by the same routine restoration uses.
    pub fn latent(&self, eps: &Tensor) -> Result<Tensor> {
        ddim_update(
            eps,
            &self.z_last,
            self.alpha_bars.0,
            self.alpha_bars.1,
            self.noise.as_ref(),
        )
    }

    /// `Clip(Dec(ℋ(ε, z_last)))`.
    pub fn image(&self, eps: &Tensor) -> Result<Tensor> {
        let x = self.rldm.decode(&self.latent(eps)?)?;
        clip_budget(&x, &self.anchor, self.rho)
    }

    /// Loss value and `∇_ε` loss.
    pub fn evaluate(&self, surrogate: &dyn Embedder, eps: &Tensor) -> Result<(f64, Tensor)> {
        let ae = self.rldm.autoencoder();
        let mut g = Graph::new();
        let p = ae.params().bind_constant(&mut g);
        let e = g.leaf(eps.unsqueeze0());
        let e_term = g.scale(e, self.coeffs.coef_eps);
        let mut base = self.z_last.scale(self.coeffs.coef_z);
        if let (true, Some(n)) = (self.coeffs.sigma > 0.0, &self.noise) {
            base.add_assign(&n.scale(self.coeffs.sigma))?;
        }
        let base = g.constant(base.unsqueeze0());
        let z = g.add(base, e_term)?;
        let raw = ae.decode_scaled_graph(&mut g, &p, z)?;
        let boxed = g.clamp(raw, &self.lo, &self.hi, self.mode)?;
        let x = g.clamp(
            boxed,
            &Tensor::zeros(self.lo.shape()),
            &Tensor::ones(self.lo.shape()),
            ClampGrad::Exact,
        )?;
        let loss = loss_var(&mut g, surrogate, x, &self.target)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).data()[0], grads.wrt(e).index_outer(0)?))
    }
}

/// Pixel-space objective `x ↦ ‖φ(F(x)) − φ(F(x_t))‖²`.
pub fn pixel_objective(surrogate: &dyn Embedder, x: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let xv = g.leaf(x.unsqueeze0());
    let loss = loss_var(&mut g, surrogate, xv, target)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).data()[0], grads.wrt(xv).index_outer(0)?))
}

/// Wraps the surrogate so each attack iteration sees a fresh dropout mask
/// on every intermediate feature map.
pub fn dfanet_dropout_wrap(surrogate: &EmbeddingModel, p: f64, seed: u64) -> Result<DropoutSurrogate<'_>> {
    DropoutSurrogate::new(surrogate, p, seed)
}

fn attack_view<'m>(surrogate: &'m EmbeddingModel, cfg: &AttackConfig) -> Result<Box<dyn Embedder + 'm>> {
    Ok(if cfg.variant.uses_dropout() {
        Box::new(dfanet_dropout_wrap(surrogate, cfg.dropout, cfg.seed)?)
    } else {
        Box::new(surrogate.clone())
    })
}

fn signed_step(x: &Tensor, grad: &Tensor, beta: f64) -> Result<Tensor> {
    Ok(x.zip_map(grad, "sign_step", |v, d| v - beta * sign(d))?)
}

fn diverged(variant: Variant, iteration: usize, trace: &[f64]) -> Error {
    Error::Diverged(format!(
        "{} attack loss became non-finite at iteration {iteration}; loss trace {trace:?}",
        variant.flag()
    ))
}

/// Algorithm 1: restore `x_s`, then iteratively perturb the final-step noise
/// prediction by signed gradient steps on the attack loss, recomputing the
/// final latent from the saved pre-final latent each time. The returned
/// image is clipped to the budget around the restoration.
pub fn advrestore_attack(
    x_s: &Tensor,
    x_t: &Tensor,
    rldm: &Rldm,
    surrogate: &EmbeddingModel,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let restoration = rldm.restore(x_s, cfg.seed)?;
    let target = target_embedding(surrogate, x_t)?;
    let obj =
        FinalStepObjective::from_restoration(rldm, &restoration, cfg.rho, target.clone(), cfg.budget_gradient.into())?;
    let mut view = attack_view(surrogate, cfg)?;
    let mut eps = restoration.eps_final.clone();
    let mut loss_trace = Vec::with_capacity(cfg.n_max);
    let mut distance_trace = Vec::with_capacity(cfg.n_max + 1);
    for i in 0..cfg.n_max {
        let (loss, grad) = obj.evaluate(view.as_ref(), &eps)?;
        loss_trace.push(loss);
        if !loss.is_finite() || !grad.is_finite() {
            return Err(diverged(cfg.variant, i, &loss_trace));
        }
        distance_trace.push(if cfg.variant.uses_dropout() {
            distance_to_target(surrogate, &obj.image(&eps)?, &target)?
        } else {
            loss
        });
        eps = signed_step(&eps, &grad, cfg.beta)?;
        view.next_iteration();
    }
    let x_adv = obj.image(&eps)?;
    distance_trace.push(distance_to_target(surrogate, &x_adv, &target)?);
    finish(cfg, x_adv, restoration.image, loss_trace, distance_trace)
}

/// Iterative sign-gradient attack in pixel space around the attacker image.
/// With a dropout variant this is the DFANet-style baseline.
pub fn fim_attack(x_s: &Tensor, x_t: &Tensor, surrogate: &EmbeddingModel, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let target = target_embedding(surrogate, x_t)?;
    let mut view = attack_view(surrogate, cfg)?;
    let anchor = x_s.map(|v| v.clamp(0.0, 1.0));
    let mut x = anchor.clone();
    let mut loss_trace = Vec::with_capacity(cfg.n_max);
    let mut distance_trace = Vec::with_capacity(cfg.n_max + 1);
    for i in 0..cfg.n_max {
        let (loss, grad) = pixel_objective(view.as_ref(), &x, &target)?;
        loss_trace.push(loss);
        if !loss.is_finite() || !grad.is_finite() {
            return Err(diverged(cfg.variant, i, &loss_trace));
        }
        distance_trace.push(if cfg.variant.uses_dropout() {
            distance_to_target(surrogate, &x, &target)?
        } else {
            loss
        });
        x = clip_budget(&signed_step(&x, &grad, cfg.beta)?, &anchor, cfg.rho)?;
        view.next_iteration();
    }
    distance_trace.push(distance_to_target(surrogate, &x, &target)?);
    finish(cfg, x, anchor, loss_trace, distance_trace)
}

fn finish(
    cfg: &AttackConfig,
    x_adv: Tensor,
    x_ref: Tensor,
    loss_trace: Vec<f64>,
    distance_trace: Vec<f64>,
) -> Result<AttackResult> {
    let budget_linf = x_adv.max_abs_diff(&x_ref)?;
    if budget_linf > cfg.rho + 1e-9 || x_adv.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid("attack", format!("output violates the budget: {budget_linf}")));
    }
    Ok(AttackResult {
        variant: cfg.variant,
        x_adv,
        x_ref,
        iterations_run: loss_trace.len(),
        loss_trace,
        distance_trace,
        budget_linf,
    })
}

/// Runs the attack selected by `cfg.variant`.
pub fn run_attack(
    x_s: &Tensor,
    x_t: &Tensor,
    rldm: &Rldm,
    surrogate: &EmbeddingModel,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    if cfg.variant.is_advrestore() {
        advrestore_attack(x_s, x_t, rldm, surrogate, cfg)
    } else {
        fim_attack(x_s, x_t, surrogate, cfg)
    }
}
