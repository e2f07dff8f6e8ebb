//! Material point mechanics for the two material families: compressible
//! Neo-Hookean and the multi-branch visco-hyperelastic model (Arruda-Boyce
//! equilibrium network plus Neo-Hookean non-equilibrium branches with unimodular
//! internal variables).
//!
//! Stresses and consistent tangents are closed-form. [`fd`] holds the central
//! difference oracle they are checked against.

use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh_forge::TetMesh;

/// `D[3i + j][3k + l] = dP_ij / dF_kl`.
pub type Tangent = SMatrix<f64, 9, 9>;

/// Largest admissible chain stretch ratio before the locking guard trips.
pub const LOCKING_GUARD: f64 = 0.999;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstitutiveError {
    #[error("non-positive volume ratio J = {0}")]
    NonPositiveJacobian(f64),
    #[error("chain stretch ratio {0} is at the locking limit")]
    ChainLocking(f64),
    #[error("inverse Langevin approximation evaluated at |z| = {0} >= 1")]
    LangevinPole(f64),
    #[error("invalid material parameters: {0}")]
    InvalidParameters(String),
    #[error("degenerate reference element {0}")]
    DegenerateElement(usize),
    #[error("node {0} has no adjacent element")]
    IsolatedNode(usize),
    #[error("expected {expected} element values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Padé approximation of the inverse Langevin function, `z (3 - z^2) / (1 - z^2)`.
pub fn langevin_beta(z: f64) -> Result<f64, ConstitutiveError> {
    if z.abs() >= 1.0 {
        return Err(ConstitutiveError::LangevinPole(z.abs()));
    }
    Ok(z * (3.0 - z * z) / (1.0 - z * z))
}

fn beta_parts(z: f64) -> (f64, f64, f64) {
    let w = 1.0 - z * z;
    let beta = z * (3.0 - z * z) / w;
    let d1 = (3.0 + z.powi(4)) / (w * w);
    let d2 = (12.0 * z + 4.0 * z.powi(3)) / (w * w * w);
    (beta, d1, d2)
}

/// `ln(b / sinh b)` without overflow for large `b`.
fn ln_b_over_sinh(b: f64) -> f64 {
    if b < 1e-4 {
        -b * b / 6.0 + b.powi(4) / 180.0
    } else if b > 20.0 {
        b.ln() - (b - std::f64::consts::LN_2 + (-2.0 * b).exp().ln_1p())
    } else {
        (b / b.sinh()).ln()
    }
}

/// `1/b - coth b`.
fn inv_minus_coth(b: f64) -> f64 {
    if b < 1e-3 {
        -b / 3.0 + b.powi(3) / 45.0 - 2.0 * b.powi(5) / 945.0
    } else {
        1.0 / b - 1.0 / b.tanh()
    }
}

/// `1/sinh^2 b - 1/b^2`.
fn inv_sinh2_minus_inv_b2(b: f64) -> f64 {
    if b < 1e-3 {
        -1.0 / 3.0 + b * b / 15.0 - 2.0 * b.powi(4) / 189.0
    } else {
        let s = b.sinh();
        let inv_s2 = if s.is_finite() { 1.0 / (s * s) } else { 0.0 };
        inv_s2 - 1.0 / (b * b)
    }
}

/// Eight-chain bracket `z beta(z) + ln(beta / sinh beta)` and its first two
/// derivatives in `z`.
fn chain_bracket(z: f64) -> (f64, f64, f64) {
    let (beta, d1, d2) = beta_parts(z);
    let value = z * beta + ln_b_over_sinh(beta);
    let q = z + inv_minus_coth(beta);
    let dq = 1.0 + d1 * inv_sinh2_minus_inv_b2(beta);
    (value, beta + d1 * q, d1 + d2 * q + d1 * dq)
}

/// Deformation gradient with the derived kinematic quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformationGradient(pub Matrix3<f64>);

impl DeformationGradient {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn jacobian(&self) -> f64 {
        self.0.determinant()
    }

    pub fn right_cauchy_green(&self) -> Matrix3<f64> {
        self.0.tr_mul(&self.0)
    }

    /// Distortional part `J^(-2/3) C`.
    pub fn distortional_cauchy_green(&self) -> Matrix3<f64> {
        self.right_cauchy_green() * self.jacobian().powf(-2.0 / 3.0)
    }

    pub fn chain_stretch(&self) -> f64 {
        (self.distortional_cauchy_green().trace() / 3.0).sqrt()
    }

    fn checked_inverse_transpose(&self) -> Result<(f64, Matrix3<f64>), ConstitutiveError> {
        let j = self.jacobian();
        if !(j > 0.0) {
            return Err(ConstitutiveError::NonPositiveJacobian(j));
        }
        let inv = self.0.try_inverse().ok_or(ConstitutiveError::NonPositiveJacobian(j))?;
        Ok((j, inv.transpose()))
    }
}

/// Symmetric Cauchy stress stored as (xx, yy, zz, xy, yz, xz).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CauchyStress(pub [f64; 6]);

impl CauchyStress {
    pub fn from_matrix(s: &Matrix3<f64>) -> Self {
        Self([
            s[(0, 0)],
            s[(1, 1)],
            s[(2, 2)],
            0.5 * (s[(0, 1)] + s[(1, 0)]),
            0.5 * (s[(1, 2)] + s[(2, 1)]),
            0.5 * (s[(0, 2)] + s[(2, 0)]),
        ])
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let [xx, yy, zz, xy, yz, xz] = self.0;
        Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz)
    }

    /// Cauchy stress from first Piola stress, `J^-1 P F^T`.
    pub fn from_piola(p: &Matrix3<f64>, f: &DeformationGradient) -> Self {
        Self::from_matrix(&(p * f.0.transpose() / f.jacobian()))
    }
}

/// `sqrt(3/2 s:s)` with `s` the deviatoric part of `sigma`.
pub fn von_mises(sigma: &CauchyStress) -> f64 {
    let s = sigma.to_matrix();
    let dev = s - Matrix3::identity() * (s.trace() / 3.0);
    (1.5 * dev.dot(&dev)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeoHookean {
    pub mu: f64,
    pub lambda: f64,
}

impl Default for NeoHookean {
    fn default() -> Self {
        Self { mu: 1.0, lambda: 10.0 }
    }
}

impl NeoHookean {
    pub fn new(mu: f64, lambda: f64) -> Result<Self, ConstitutiveError> {
        let m = Self { mu, lambda };
        m.check()?;
        Ok(m)
    }

    pub fn check(&self) -> Result<(), ConstitutiveError> {
        if !(self.mu > 0.0 && self.lambda >= 0.0) {
            return Err(ConstitutiveError::InvalidParameters(format!(
                "need mu > 0 and lambda >= 0, got mu = {}, lambda = {}",
                self.mu, self.lambda
            )));
        }
        Ok(())
    }

    pub fn energy(&self, f: &DeformationGradient) -> Result<f64, ConstitutiveError> {
        let j = f.jacobian();
        if !(j > 0.0) {
            return Err(ConstitutiveError::NonPositiveJacobian(j));
        }
        let ln_j = j.ln();
        Ok(0.5 * self.mu * (f.right_cauchy_green().trace() - 3.0) - self.mu * ln_j + 0.5 * self.lambda * ln_j * ln_j)
    }

    /// `P = mu (F - F^-T) + lambda ln(J) F^-T`.
    pub fn piola(&self, f: &DeformationGradient) -> Result<Matrix3<f64>, ConstitutiveError> {
        let (j, f_it) = f.checked_inverse_transpose()?;
        Ok(self.mu * (f.0 - f_it) + self.lambda * j.ln() * f_it)
    }

    pub fn piola_and_tangent(&self, f: &DeformationGradient) -> Result<(Matrix3<f64>, Tangent), ConstitutiveError> {
        let (j, f_it) = f.checked_inverse_transpose()?;
        let ln_j = j.ln();
        let p = self.mu * (f.0 - f_it) + self.lambda * ln_j * f_it;
        let coef = self.lambda * ln_j - self.mu;
        let d = build_tangent(|df| {
            self.mu * df + self.lambda * f_it.dot(df) * f_it - coef * (f_it * df.transpose() * f_it)
        });
        Ok((p, d))
    }

    pub fn cauchy(&self, f: &DeformationGradient) -> Result<CauchyStress, ConstitutiveError> {
        Ok(CauchyStress::from_piola(&self.piola(f)?, f))
    }
}

fn build_tangent(apply: impl Fn(&Matrix3<f64>) -> Matrix3<f64>) -> Tangent {
    let mut d = Tangent::zeros();
    for k in 0..3 {
        for l in 0..3 {
            let mut df = Matrix3::zeros();
            df[(k, l)] = 1.0;
            let dp = apply(&df);
            for i in 0..3 {
                for j in 0..3 {
                    d[(3 * i + j, 3 * k + l)] = dp[(i, j)];
                }
            }
        }
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    /// Non-equilibrium shear modulus.
    #[serde(rename = "G")]
    pub shear_modulus: f64,
    /// Relaxation time in seconds.
    pub tau: f64,
}

/// Visco-hyperelastic material: Arruda-Boyce equilibrium network, Neo-Hookean
/// non-equilibrium branches and a `kappa/2 (J-1)^2` volumetric penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ViscoParams", into = "ViscoParams")]
pub struct ViscoMaterial {
    pub g_eq: f64,
    pub lambda_l: f64,
    pub kappa: f64,
    pub rho0: f64,
    pub branches: Vec<Branch>,
    c0: f64,
}

#[derive(Serialize, Deserialize)]
struct ViscoParams {
    #[serde(rename = "G_eq")]
    g_eq: f64,
    #[serde(rename = "lambda_L")]
    lambda_l: f64,
    kappa: f64,
    rho0: f64,
    branches: Vec<Branch>,
}

impl TryFrom<ViscoParams> for ViscoMaterial {
    type Error = ConstitutiveError;

    fn try_from(p: ViscoParams) -> Result<Self, Self::Error> {
        ViscoMaterial::new(p.g_eq, p.lambda_l, p.kappa, p.rho0, p.branches)
    }
}

impl From<ViscoMaterial> for ViscoParams {
    fn from(m: ViscoMaterial) -> Self {
        ViscoParams { g_eq: m.g_eq, lambda_l: m.lambda_l, kappa: m.kappa, rho0: m.rho0, branches: m.branches }
    }
}

/// Bulk modulus used for linear tets; the published value is
/// [`ViscoMaterial::PUBLISHED_KAPPA`].
pub const DESK_KAPPA: f64 = 4_000.0;

impl ViscoMaterial {
    pub const PUBLISHED_KAPPA: f64 = 400_000.0;

    pub fn new(g_eq: f64, lambda_l: f64, kappa: f64, rho0: f64, branches: Vec<Branch>) -> Result<Self, ConstitutiveError> {
        let bad = |msg: String| Err(ConstitutiveError::InvalidParameters(msg));
        if !(g_eq > 0.0 && kappa > 0.0 && rho0 > 0.0) {
            return bad(format!("moduli and density must be positive (G_eq {g_eq}, kappa {kappa}, rho0 {rho0})"));
        }
        if !(lambda_l > 1.0) {
            return bad(format!("locking stretch must exceed 1, got {lambda_l}"));
        }
        for (i, b) in branches.iter().enumerate() {
            if !(b.shear_modulus > 0.0 && b.tau > 0.0) {
                return bad(format!("branch {i} needs G > 0 and tau > 0"));
            }
        }
        let (c0, _, _) = chain_bracket(1.0 / lambda_l);
        Ok(Self { g_eq, lambda_l, kappa, rho0, branches, c0 })
    }

    /// Published parameter set with the bulk modulus replaced by `kappa`.
    pub fn reference_with_kappa(kappa: f64) -> Self {
        Self::new(
            200.0,
            10.0,
            kappa,
            1.3e-5,
            vec![
                Branch { shear_modulus: 300.0, tau: 0.001 },
                Branch { shear_modulus: 600.0, tau: 0.2 },
                Branch { shear_modulus: 150.0, tau: 3.0 },
            ],
        )
        .expect("reference parameters are valid")
    }

    /// Published parameters with the desk-scale bulk modulus.
    pub fn reference() -> Self {
        Self::reference_with_kappa(DESK_KAPPA)
    }

    /// The same material with every non-equilibrium branch removed.
    pub fn equilibrium_only(&self) -> Self {
        Self { branches: Vec::new(), ..self.clone() }
    }

    pub fn c0(&self) -> f64 {
        self.c0
    }

    pub fn rest_state(&self) -> InternalState {
        InternalState { a: vec![Matrix3::identity(); self.branches.len()] }
    }

    fn chain_ratio(&self, ibar: f64) -> Result<(f64, f64), ConstitutiveError> {
        let stretch = (ibar / 3.0).sqrt();
        let ratio = stretch / self.lambda_l;
        if ratio >= LOCKING_GUARD {
            return Err(ConstitutiveError::ChainLocking(ratio));
        }
        Ok((stretch, ratio))
    }

    /// Equilibrium energy and its first two derivatives in `tr C-bar`.
    fn equilibrium_terms(&self, ibar: f64) -> Result<(f64, f64, f64), ConstitutiveError> {
        let (stretch, z) = self.chain_ratio(ibar)?;
        let (value, dz, dzz) = chain_bracket(z);
        let scale = self.g_eq * self.lambda_l * self.lambda_l;
        let z_i = 1.0 / (6.0 * stretch * self.lambda_l);
        let z_ii = -1.0 / (36.0 * stretch.powi(3) * self.lambda_l);
        Ok((
            scale * (value - self.c0),
            scale * dz * z_i,
            scale * (dzz * z_i * z_i + dz * z_ii),
        ))
    }

    fn check_state(&self, a: &InternalState) {
        assert_eq!(a.a.len(), self.branches.len(), "one internal variable per branch");
    }

    pub fn energy(&self, f: &DeformationGradient, a: &InternalState) -> Result<f64, ConstitutiveError> {
        self.check_state(a);
        let j = f.jacobian();
        if !(j > 0.0) {
            return Err(ConstitutiveError::NonPositiveJacobian(j));
        }
        let cbar = f.distortional_cauchy_green();
        let (psi_eq, _, _) = self.equilibrium_terms(cbar.trace())?;
        let mut psi = psi_eq + 0.5 * self.kappa * (j - 1.0).powi(2);
        for (b, ai) in self.branches.iter().zip(&a.a) {
            psi += branch_energy(b.shear_modulus, &cbar, ai)?;
        }
        Ok(psi)
    }

    /// Non-equilibrium energy only.
    pub fn branch_energy(&self, cbar: &Matrix3<f64>, a: &InternalState) -> Result<f64, ConstitutiveError> {
        self.check_state(a);
        let mut psi = 0.0;
        for (b, ai) in self.branches.iter().zip(&a.a) {
            psi += branch_energy(b.shear_modulus, cbar, ai)?;
        }
        Ok(psi)
    }

    pub fn piola(&self, f: &DeformationGradient, a: &InternalState) -> Result<Matrix3<f64>, ConstitutiveError> {
        Ok(self.evaluate(f, a, false)?.0)
    }

    pub fn piola_and_tangent(
        &self,
        f: &DeformationGradient,
        a: &InternalState,
    ) -> Result<(Matrix3<f64>, Tangent), ConstitutiveError> {
        let (p, d) = self.evaluate(f, a, true)?;
        Ok((p, d.expect("tangent requested")))
    }

    pub fn cauchy(&self, f: &DeformationGradient, a: &InternalState) -> Result<CauchyStress, ConstitutiveError> {
        Ok(CauchyStress::from_piola(&self.piola(f, a)?, f))
    }

    fn evaluate(
        &self,
        f: &DeformationGradient,
        a: &InternalState,
        with_tangent: bool,
    ) -> Result<(Matrix3<f64>, Option<Tangent>), ConstitutiveError> {
        self.check_state(a);
        let (j, f_it) = f.checked_inverse_transpose()?;
        let scale = j.powf(-2.0 / 3.0);
        let iso = IsochoricKinematics { f: f.0, f_it, scale };

        let ibar = scale * f.0.dot(&f.0);
        let (_, d1, d2) = self.equilibrium_terms(ibar)?;
        let mut terms = vec![(Matrix3::identity(), d1, d2)];
        for (b, ai) in self.branches.iter().zip(&a.a) {
            let inv = ai.try_inverse().ok_or_else(|| {
                ConstitutiveError::InvalidParameters("singular internal variable".into())
            })?;
            terms.push((inv, 0.5 * b.shear_modulus, 0.0));
        }

        let du = self.kappa * (j - 1.0);
        let d2u = self.kappa;
        let mut p = du * j * f_it;
        let grads: Vec<Matrix3<f64>> = terms.iter().map(|(m, _, _)| iso.gradient(m)).collect();
        for ((_, d1, _), g) in terms.iter().zip(&grads) {
            p += *d1 * g;
        }
        if !with_tangent {
            return Ok((p, None));
        }
        let d = build_tangent(|df| {
            let tr = f_it.dot(df);
            let d_f_it = -(f_it * df.transpose() * f_it);
            let mut dp = (d2u * j + du) * j * tr * f_it + du * j * d_f_it;
            for ((m, d1, d2), g) in terms.iter().zip(&grads) {
                dp += *d2 * g.dot(df) * g + *d1 * iso.gradient_variation(m, df, tr, &d_f_it);
            }
            dp
        });
        Ok((p, Some(d)))
    }

    /// Backward-Euler update of every branch towards `cbar`, followed by
    /// unimodular renormalisation.
    pub fn evolve_internal(&self, a: &InternalState, cbar: &Matrix3<f64>, dt: f64) -> InternalState {
        self.check_state(a);
        InternalState {
            a: self
                .branches
                .iter()
                .zip(&a.a)
                .map(|(b, ai)| relax_towards(ai, cbar, dt / b.tau))
                .collect(),
        }
    }
}

fn branch_energy(g: f64, cbar: &Matrix3<f64>, a: &Matrix3<f64>) -> Result<f64, ConstitutiveError> {
    let inv = a
        .try_inverse()
        .ok_or_else(|| ConstitutiveError::InvalidParameters("singular internal variable".into()))?;
    Ok(0.5 * g * (cbar.dot(&inv) - 3.0))
}

/// One implicit relaxation step with `ratio = dt / tau`.
pub fn relax_towards(a: &Matrix3<f64>, cbar: &Matrix3<f64>, ratio: f64) -> Matrix3<f64> {
    let mixed = (a + cbar * ratio) / (1.0 + ratio);
    let sym = (mixed + mixed.transpose()) * 0.5;
    sym / sym.determinant().cbrt()
}

/// Derivatives of `I_M = J^(-2/3) (F M) : F` with respect to `F`.
struct IsochoricKinematics {
    f: Matrix3<f64>,
    f_it: Matrix3<f64>,
    scale: f64,
}

impl IsochoricKinematics {
    fn gradient(&self, m: &Matrix3<f64>) -> Matrix3<f64> {
        let fm = self.f * m;
        let i_m = fm.dot(&self.f);
        self.scale * (2.0 * fm - (2.0 / 3.0) * i_m * self.f_it)
    }

    fn gradient_variation(&self, m: &Matrix3<f64>, df: &Matrix3<f64>, tr: f64, d_f_it: &Matrix3<f64>) -> Matrix3<f64> {
        let fm = self.f * m;
        let i_m = fm.dot(&self.f);
        let d_scale = -(2.0 / 3.0) * self.scale * tr;
        let d_i_m = 2.0 * fm.dot(df);
        d_scale * (2.0 * fm - (2.0 / 3.0) * i_m * self.f_it)
            + self.scale * (2.0 * df * m - (2.0 / 3.0) * (d_i_m * self.f_it + i_m * d_f_it))
    }
}

/// Per-point internal variables, one unimodular SPD tensor per branch.
#[derive(Debug, Clone, PartialEq)]
pub struct InternalState {
    pub a: Vec<Matrix3<f64>>,
}

impl InternalState {
    pub fn max_unimodularity_error(&self) -> f64 {
        self.a.iter().map(|a| (a.determinant() - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn max_asymmetry(&self) -> f64 {
        self.a.iter().map(|a| (a - a.transpose()).amax()).fold(0.0, f64::max)
    }
}

/// Material as read from the parameter JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum Material {
    NeoHookean(NeoHookean),
    Visco(ViscoMaterial),
}

impl Material {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let m: Material = serde_json::from_str(text)?;
        if let Material::NeoHookean(nh) = &m {
            nh.check().map_err(serde::de::Error::custom)?;
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("material serialization is infallible")
    }

    pub fn branch_count(&self) -> usize {
        match self {
            Material::NeoHookean(_) => 0,
            Material::Visco(v) => v.branches.len(),
        }
    }

    pub fn density(&self) -> f64 {
        match self {
            Material::NeoHookean(_) => 0.0,
            Material::Visco(v) => v.rho0,
        }
    }

    pub fn rest_state(&self) -> InternalState {
        InternalState { a: vec![Matrix3::identity(); self.branch_count()] }
    }

    pub fn energy(&self, f: &DeformationGradient, a: &InternalState) -> Result<f64, ConstitutiveError> {
        match self {
            Material::NeoHookean(m) => m.energy(f),
            Material::Visco(m) => m.energy(f, a),
        }
    }

    pub fn piola(&self, f: &DeformationGradient, a: &InternalState) -> Result<Matrix3<f64>, ConstitutiveError> {
        match self {
            Material::NeoHookean(m) => m.piola(f),
            Material::Visco(m) => m.piola(f, a),
        }
    }

    pub fn piola_and_tangent(
        &self,
        f: &DeformationGradient,
        a: &InternalState,
    ) -> Result<(Matrix3<f64>, Tangent), ConstitutiveError> {
        match self {
            Material::NeoHookean(m) => m.piola_and_tangent(f),
            Material::Visco(m) => m.piola_and_tangent(f, a),
        }
    }

    pub fn cauchy(&self, f: &DeformationGradient, a: &InternalState) -> Result<CauchyStress, ConstitutiveError> {
        Ok(CauchyStress::from_piola(&self.piola(f, a)?, f))
    }

    pub fn evolve_internal(&self, a: &InternalState, cbar: &Matrix3<f64>, dt: f64) -> InternalState {
        match self {
            Material::NeoHookean(_) => a.clone(),
            Material::Visco(m) => m.evolve_internal(a, cbar, dt),
        }
    }
}

/// Reference shape-function gradients of a linear tet: row `a` is the
/// gradient of `N_a`.
pub fn shape_gradients(mesh: &TetMesh, tet: usize) -> Result<[Vector3<f64>; 4], ConstitutiveError> {
    let [x0, x1, x2, x3] = mesh.tet_points(tet);
    let dm = Matrix3::from_columns(&[x1 - x0, x2 - x0, x3 - x0]);
    let vol = dm.determinant() / 6.0;
    let scale = dm.abs().max().max(f64::MIN_POSITIVE);
    if vol.abs() <= 1e-14 * scale.powi(3) {
        return Err(ConstitutiveError::DegenerateElement(tet));
    }
    let inv = dm.try_inverse().ok_or(ConstitutiveError::DegenerateElement(tet))?;
    let g1 = inv.row(0).transpose();
    let g2 = inv.row(1).transpose();
    let g3 = inv.row(2).transpose();
    Ok([-(g1 + g2 + g3), g1, g2, g3])
}

/// `F = I + grad u`, constant over a linear tet.
pub fn deformation_gradient_from(grads: &[Vector3<f64>; 4], u: [&Vector3<f64>; 4]) -> DeformationGradient {
    let mut f = Matrix3::identity();
    for (g, ua) in grads.iter().zip(u) {
        f += ua * g.transpose();
    }
    DeformationGradient(f)
}

pub fn tet_deformation_gradient(
    mesh: &TetMesh,
    u: &[Vector3<f64>],
    tet: usize,
) -> Result<DeformationGradient, ConstitutiveError> {
    let grads = shape_gradients(mesh, tet)?;
    let q = mesh.tets[tet];
    Ok(deformation_gradient_from(&grads, [&u[q[0]], &u[q[1]], &u[q[2]], &u[q[3]]]))
}

/// Volume-weighted average of element stresses onto nodes.
pub fn project_stress_to_nodes(
    mesh: &TetMesh,
    element: &[CauchyStress],
) -> Result<Vec<CauchyStress>, ConstitutiveError> {
    if element.len() != mesh.tets.len() {
        return Err(ConstitutiveError::LengthMismatch { expected: mesh.tets.len(), got: element.len() });
    }
    let mut acc = vec![[0.0; 6]; mesh.nodes.len()];
    let mut weight = vec![0.0; mesh.nodes.len()];
    for (t, q) in mesh.tets.iter().enumerate() {
        let v = mesh.tet_volume(t);
        for &n in q {
            weight[n] += v;
            for (slot, s) in acc[n].iter_mut().zip(element[t].0) {
                *slot += v * s;
            }
        }
    }
    acc.into_iter()
        .zip(weight)
        .enumerate()
        .map(|(n, (sum, w))| {
            if w > 0.0 {
                Ok(CauchyStress(sum.map(|s| s / w)))
            } else {
                Err(ConstitutiveError::IsolatedNode(n))
            }
        })
        .collect()
}

/// Central finite-difference oracles.
pub mod fd {
    use super::Tangent;
    use nalgebra::Matrix3;

    /// Gradient of a scalar function of `F`.
    pub fn gradient<E>(energy: impl Fn(&Matrix3<f64>) -> Result<f64, E>, f: &Matrix3<f64>, h: f64) -> Result<Matrix3<f64>, E> {
        let mut g = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                let mut fp = *f;
                let mut fm = *f;
                fp[(i, j)] += h;
                fm[(i, j)] -= h;
                g[(i, j)] = (energy(&fp)? - energy(&fm)?) / (2.0 * h);
            }
        }
        Ok(g)
    }

    /// Derivative of a matrix-valued function of `F`, laid out like [`Tangent`].
    pub fn tangent<E>(
        stress: impl Fn(&Matrix3<f64>) -> Result<Matrix3<f64>, E>,
        f: &Matrix3<f64>,
        h: f64,
    ) -> Result<Tangent, E> {
        let mut d = Tangent::zeros();
        for k in 0..3 {
            for l in 0..3 {
                let mut fp = *f;
                let mut fm = *f;
                fp[(k, l)] += h;
                fm[(k, l)] -= h;
                let dp = (stress(&fp)? - stress(&fm)?) / (2.0 * h);
                for i in 0..3 {
                    for j in 0..3 {
                        d[(3 * i + j, 3 * k + l)] = dp[(i, j)];
                    }
                }
            }
        }
        Ok(d)
    }
}
