//! Phase pooling: a soft max-pool ("magnitude") paired with a soft
//! argmax-pool ("phase") over volumetric feature × spatial neighborhoods, and
//! the un-pooling operator that places magnitudes back at the locations the
//! phases point to.
//!
//! Inputs are activation volumes `z` of shape `[F, X, Y]`. A [`PoolSpec`]
//! tiles the volume with groups of extent `(gf, gx, gy)` at strides
//! `(sf, sx, sy)`. Within a group the softmax weights are
//! `w_j = exp(β z_j) / Σ exp(β z_i)`, and
//!
//! * magnitude `m = Σ w_j z_j`, which tends to the group max as β grows and
//!   equals the group average at β = 0;
//! * phase `p = Σ w_j c_j`, where `c_j` are the member's local coordinates
//!   on a grid running from -1 to +1 in equal steps along every axis whose
//!   group extent exceeds 1.
//!
//! Axes of extent 1 carry no phase coordinate, so `p` has between 0 and 3
//! components per group.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Operator};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default softmax sharpness.
pub const DEFAULT_BETA: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    /// Group extent over (feature, x, y).
    pub group: [usize; 3],
    /// Step between group origins over (feature, x, y).
    pub stride: [usize; 3],
    pub beta: f64,
}

impl PoolSpec {
    /// Non-overlapping groups.
    pub fn new(group: [usize; 3], beta: f64) -> Self {
        PoolSpec {
            group,
            stride: group,
            beta,
        }
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.group.iter().chain(&self.stride).any(|&v| v == 0) {
            return Err(Error::config("pool", "group extents and strides must be positive"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("pool.beta", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// Axes (0 = feature, 1 = x, 2 = y) that contribute a phase coordinate.
    pub fn phase_axes(&self) -> Vec<usize> {
        (0..3).filter(|&a| self.group[a] > 1).collect()
    }

    pub fn phase_dim(&self) -> usize {
        self.phase_axes().len()
    }

    /// Validates that `shape` is tiled exactly and returns the tiling.
    pub fn tiling(&self, shape: &[usize]) -> Result<Tiling> {
        self.validate()?;
        if shape.len() != 3 {
            return Err(Error::shape(
                "phase_pool",
                format!("expected [F, X, Y] activations, got {shape:?}"),
            ));
        }
        let names = ["feature", "x", "y"];
        let mut counts = [0usize; 3];
        for a in 0..3 {
            let (n, g, s) = (shape[a], self.group[a], self.stride[a]);
            if g > n || (n - g) % s != 0 {
                return Err(Error::shape(
                    "phase_pool",
                    format!(
                        "{} axis: extent {n} is not tiled by groups of {g} at stride {s}",
                        names[a]
                    ),
                ));
            }
            counts[a] = (n - g) / s + 1;
        }
        Ok(Tiling {
            dims: [shape[0], shape[1], shape[2]],
            group: self.group,
            stride: self.stride,
            counts,
        })
    }
}

/// Local coordinates of a group axis: `extent` equally spaced values from
/// -1 to +1, or the single value 0 for extent 1.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateGrid {
    pub axes: [Vec<f64>; 3],
}

pub fn axis_coordinates(extent: usize) -> Vec<f64> {
    if extent <= 1 {
        return vec![0.0];
    }
    let step = 2.0 / (extent - 1) as f64;
    (0..extent).map(|i| -1.0 + step * i as f64).collect()
}

impl CoordinateGrid {
    pub fn for_spec(spec: &PoolSpec) -> Self {
        CoordinateGrid {
            axes: spec.group.map(axis_coordinates),
        }
    }
}

/// How a [`PoolSpec`] tiles a concrete `[F, X, Y]` volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tiling {
    pub dims: [usize; 3],
    pub group: [usize; 3],
    pub stride: [usize; 3],
    /// Number of groups along each axis.
    pub counts: [usize; 3],
}

impl Tiling {
    pub fn num_groups(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn group_size(&self) -> usize {
        self.group.iter().product()
    }

    /// Flat indices into the input volume of the members of group `k`, in
    /// (f, x, y) row-major order within the group.
    fn members(&self, k: usize, out: &mut Vec<usize>) {
        out.clear();
        let [_, cx, cy] = self.counts;
        let (kf, kx, ky) = (k / (cx * cy), (k / cy) % cx, k % cy);
        let origin = [kf * self.stride[0], kx * self.stride[1], ky * self.stride[2]];
        let [_, nx, ny] = self.dims;
        for df in 0..self.group[0] {
            for dx in 0..self.group[1] {
                let row = ((origin[0] + df) * nx + origin[1] + dx) * ny + origin[2];
                out.extend(row..row + self.group[2]);
            }
        }
    }

    /// Local (f, x, y) offsets of member number `j` of a group.
    fn local(&self, j: usize) -> [usize; 3] {
        let [_, gx, gy] = self.group;
        [j / (gx * gy), (j / gy) % gx, j % gy]
    }
}

/// Numerically stable softmax of `β z` over the given members.
fn softmax_into(z: &[f64], members: &[usize], beta: f64, w: &mut Vec<f64>) {
    w.clear();
    let max = members.iter().map(|&i| z[i]).fold(f64::NEG_INFINITY, f64::max);
    w.extend(members.iter().map(|&i| (beta * (z[i] - max)).exp()));
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
}

fn check_nonnegative(op: &'static str, z: &Tensor) -> Result<()> {
    if let Some(i) = z.data().iter().position(|&v| v < 0.0) {
        return Err(Error::precondition(
            op,
            format!("activation {i} is negative ({})", z.data()[i]),
        ));
    }
    Ok(())
}

/// Softmax weights of every group, for inspection and tests.
pub fn group_weights(z: &Tensor, spec: &PoolSpec) -> Result<Vec<Vec<f64>>> {
    let tiling = spec.tiling(z.shape())?;
    let mut members = Vec::new();
    let mut out = Vec::with_capacity(tiling.num_groups());
    for k in 0..tiling.num_groups() {
        tiling.members(k, &mut members);
        let mut w = Vec::new();
        softmax_into(z.data(), &members, spec.beta, &mut w);
        out.push(w);
    }
    Ok(out)
}

/// Soft max-pool op; output `[cf, cx, cy]` of magnitudes.
#[derive(Clone, Copy, Debug)]
pub struct SoftMaxPool {
    pub spec: PoolSpec,
}

impl Operator for SoftMaxPool {
    fn name(&self) -> &'static str {
        "soft_max_pool"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let z = inputs[0];
        let tiling = self.spec.tiling(z.shape())?;
        check_nonnegative(self.name(), z)?;
        let (mut members, mut w) = (Vec::new(), Vec::new());
        let m = (0..tiling.num_groups())
            .map(|k| {
                tiling.members(k, &mut members);
                softmax_into(z.data(), &members, self.spec.beta, &mut w);
                members.iter().zip(&w).map(|(&i, wj)| wj * z.data()[i]).sum()
            })
            .collect();
        Tensor::new(tiling.counts.to_vec(), m)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let z = inputs[0];
        let tiling = self.spec.tiling(z.shape())?;
        let beta = self.spec.beta;
        let mut gz = vec![0.0; z.len()];
        let (mut members, mut w) = (Vec::new(), Vec::new());
        for k in 0..tiling.num_groups() {
            tiling.members(k, &mut members);
            softmax_into(z.data(), &members, beta, &mut w);
            let (mk, gk) = (output.data()[k], grad.data()[k]);
            // dm/dz_j = w_j (1 + β (z_j - m))
            for (&i, wj) in members.iter().zip(&w) {
                gz[i] += gk * wj * (1.0 + beta * (z.data()[i] - mk));
            }
        }
        Ok(vec![Some(Tensor::new(z.shape().to_vec(), gz)?)])
    }
}

/// Soft argmax-pool op; output `[d, cf, cx, cy]` of phase coordinates with
/// `d` the number of phase axes.
#[derive(Clone, Copy, Debug)]
pub struct SoftArgmaxPool {
    pub spec: PoolSpec,
}

impl SoftArgmaxPool {
    fn output_shape(&self, tiling: &Tiling) -> Vec<usize> {
        let mut shape = vec![self.spec.phase_dim().max(1)];
        shape.extend_from_slice(&tiling.counts);
        shape
    }
}

impl Operator for SoftArgmaxPool {
    fn name(&self) -> &'static str {
        "soft_argmax_pool"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let z = inputs[0];
        let tiling = self.spec.tiling(z.shape())?;
        check_nonnegative(self.name(), z)?;
        let axes = self.spec.phase_axes();
        if axes.is_empty() {
            return Err(Error::config(
                "pool.group",
                "soft argmax needs at least one axis with extent > 1",
            ));
        }
        let grid = CoordinateGrid::for_spec(&self.spec);
        let n = tiling.num_groups();
        let mut p = vec![0.0; axes.len() * n];
        let (mut members, mut w) = (Vec::new(), Vec::new());
        for k in 0..n {
            tiling.members(k, &mut members);
            softmax_into(z.data(), &members, self.spec.beta, &mut w);
            for (j, wj) in w.iter().enumerate() {
                let local = tiling.local(j);
                for (d, &a) in axes.iter().enumerate() {
                    p[d * n + k] += wj * grid.axes[a][local[a]];
                }
            }
        }
        // A convex combination of grid coordinates; only rounding can push
        // it past the ends.
        p.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        Tensor::new(self.output_shape(&tiling), p)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let z = inputs[0];
        let tiling = self.spec.tiling(z.shape())?;
        let axes = self.spec.phase_axes();
        let grid = CoordinateGrid::for_spec(&self.spec);
        let beta = self.spec.beta;
        let n = tiling.num_groups();
        let mut gz = vec![0.0; z.len()];
        let (mut members, mut w) = (Vec::new(), Vec::new());
        for k in 0..n {
            tiling.members(k, &mut members);
            softmax_into(z.data(), &members, beta, &mut w);
            // dp_a/dz_j = β w_j (c_a(j) - p_a)
            for (j, (&i, wj)) in members.iter().zip(&w).enumerate() {
                let local = tiling.local(j);
                let mut acc = 0.0;
                for (d, &a) in axes.iter().enumerate() {
                    acc += grad.data()[d * n + k] * (grid.axes[a][local[a]] - output.data()[d * n + k]);
                }
                gz[i] += beta * wj * acc;
            }
        }
        Ok(vec![Some(Tensor::new(z.shape().to_vec(), gz)?)])
    }
}

/// Un-pooling: deposits each magnitude at its continuous phase location by
/// multilinear interpolation onto the group's grid cells. Overlapping
/// groups add their deposits. Inputs are `[m, p]`.
#[derive(Clone, Debug)]
pub struct Unpool {
    pub spec: PoolSpec,
    pub output_shape: [usize; 3],
}

/// Per-axis interpolation cell: lower index and fractional offset.
#[derive(Clone, Copy)]
struct Cell {
    lo: usize,
    t: f64,
    active: bool,
}

impl Unpool {
    fn check(&self, m: &Tensor, p: &Tensor) -> Result<(Tiling, Vec<usize>)> {
        let tiling = self.spec.tiling(&self.output_shape)?;
        if m.shape() != tiling.counts {
            return Err(Error::shape(
                "unpool",
                format!("magnitude shape {:?}, tiling needs {:?}", m.shape(), tiling.counts),
            ));
        }
        let axes = self.spec.phase_axes();
        let mut want = vec![axes.len().max(1)];
        want.extend_from_slice(&tiling.counts);
        if p.shape() != want.as_slice() {
            return Err(Error::shape(
                "unpool",
                format!("phase shape {:?}, tiling needs {want:?}", p.shape()),
            ));
        }
        if let Some(v) = p.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("unpool: phase {v} outside [-1, 1]")));
        }
        Ok((tiling, axes))
    }

    fn cells(&self, p: &Tensor, axes: &[usize], n: usize, k: usize) -> [Cell; 3] {
        let mut cells = [Cell {
            lo: 0,
            t: 0.0,
            active: false,
        }; 3];
        for (d, &a) in axes.iter().enumerate() {
            let g = self.spec.group[a];
            let u = (p.data()[d * n + k] + 1.0) * 0.5 * (g - 1) as f64;
            let lo = (u.floor() as usize).min(g - 2);
            cells[a] = Cell {
                lo,
                t: u - lo as f64,
                active: true,
            };
        }
        cells
    }

    /// Calls `f(flat_index, weight, corner_bits)` for each of the 2^d
    /// corners group `k` deposits into.
    fn for_corners(
        tiling: &Tiling,
        k: usize,
        cells: &[Cell; 3],
        mut f: impl FnMut(usize, f64, [bool; 3]),
    ) {
        let [_, cx, cy] = tiling.counts;
        let origin = [
            k / (cx * cy) * tiling.stride[0],
            (k / cy) % cx * tiling.stride[1],
            k % cy * tiling.stride[2],
        ];
        let [_, nx, ny] = tiling.dims;
        for bits in 0..8u8 {
            let hi = [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0];
            if (0..3).any(|a| hi[a] && !cells[a].active) {
                continue;
            }
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let c = cells[a];
                idx[a] = origin[a] + c.lo + hi[a] as usize;
                if c.active {
                    w *= if hi[a] { c.t } else { 1.0 - c.t };
                }
            }
            f((idx[0] * nx + idx[1]) * ny + idx[2], w, hi);
        }
    }
}

impl Operator for Unpool {
    fn name(&self) -> &'static str {
        "unpool"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (m, p) = (inputs[0], inputs[1]);
        let (tiling, axes) = self.check(m, p)?;
        let n = tiling.num_groups();
        let mut out = vec![0.0; self.output_shape.iter().product()];
        for k in 0..n {
            let cells = self.cells(p, &axes, n, k);
            let mk = m.data()[k];
            Self::for_corners(&tiling, k, &cells, |i, w, _| out[i] += mk * w);
        }
        Tensor::new(self.output_shape.to_vec(), out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (m, p) = (inputs[0], inputs[1]);
        let (tiling, axes) = self.check(m, p)?;
        let n = tiling.num_groups();
        let mut gm = vec![0.0; m.len()];
        let mut gp = vec![0.0; p.len()];
        for k in 0..n {
            let cells = self.cells(p, &axes, n, k);
            let mk = m.data()[k];
            Self::for_corners(&tiling, k, &cells, |i, w, hi| {
                let g = grad.data()[i];
                gm[k] += w * g;
                for (d, &a) in axes.iter().enumerate() {
                    // weight with the factor for axis `a` replaced by its
                    // derivative in t (±1), times du/dp = (g - 1) / 2
                    let mut dw = if hi[a] { 1.0 } else { -1.0 };
                    for b in 0..3 {
                        if b != a && cells[b].active {
                            dw *= if hi[b] { cells[b].t } else { 1.0 - cells[b].t };
                        }
                    }
                    let du_dp = 0.5 * (self.spec.group[a] - 1) as f64;
                    gp[d * n + k] += mk * dw * du_dp * g;
                }
            });
        }
        Ok(vec![
            needs[0].then(|| Tensor::new(m.shape().to_vec(), gm)).transpose()?,
            needs[1].then(|| Tensor::new(p.shape().to_vec(), gp)).transpose()?,
        ])
    }

    fn kink_distance(&self, inputs: &[&Tensor]) -> Option<f64> {
        let p = inputs[1];
        let axes = self.spec.phase_axes();
        let n = inputs[0].len();
        let mut best = f64::INFINITY;
        for (d, &a) in axes.iter().enumerate() {
            let half = 0.5 * (self.spec.group[a] - 1) as f64;
            for k in 0..n {
                let u = (p.data()[d * n + k] + 1.0) * half;
                best = best.min((u - u.round()).abs() / half);
            }
        }
        Some(best)
    }
}

/// Factorized code: per-group magnitudes and phase vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Code {
    /// `[cf, cx, cy]` magnitudes.
    pub m: Tensor,
    /// `[d, cf, cx, cy]` phases.
    pub p: Tensor,
    pub spec: PoolSpec,
    /// Shape of the activation volume that was pooled.
    pub input_shape: [usize; 3],
}

impl Code {
    pub fn flat_dim(&self) -> usize {
        self.m.len() + self.p.len()
    }

    pub fn num_groups(&self) -> usize {
        self.m.len()
    }

    /// Magnitudes followed by phases.
    pub fn to_flat(&self) -> Tensor {
        Tensor::concat_flat(&[&self.m, &self.p])
    }

    pub fn with_flat(&self, flat: &Tensor) -> Result<Code> {
        if flat.len() != self.flat_dim() {
            return Err(Error::shape(
                "code",
                format!("flat code of {} values, expected {}", flat.len(), self.flat_dim()),
            ));
        }
        let nm = self.m.len();
        Ok(Code {
            m: Tensor::new(self.m.shape().to_vec(), flat.data()[..nm].to_vec())?,
            p: Tensor::new(self.p.shape().to_vec(), flat.data()[nm..].to_vec())?,
            spec: self.spec,
            input_shape: self.input_shape,
        })
    }
}

pub fn soft_max_pool(z: &Tensor, spec: &PoolSpec) -> Result<Tensor> {
    SoftMaxPool { spec: *spec }.forward(&[z])
}

pub fn soft_argmax_pool(z: &Tensor, spec: &PoolSpec) -> Result<Tensor> {
    SoftArgmaxPool { spec: *spec }.forward(&[z])
}

pub fn phase_pool(z: &Tensor, spec: &PoolSpec) -> Result<Code> {
    let m = soft_max_pool(z, spec)?;
    let p = soft_argmax_pool(z, spec)?;
    assert_phase_range(&p)?;
    Ok(Code {
        m,
        p,
        spec: *spec,
        input_shape: [z.shape()[0], z.shape()[1], z.shape()[2]],
    })
}

pub fn unpool(code: &Code, output_shape: [usize; 3]) -> Result<Tensor> {
    Unpool {
        spec: code.spec,
        output_shape,
    }
    .forward(&[&code.m, &code.p])
}

fn assert_phase_range(p: &Tensor) -> Result<()> {
    // convex combinations of grid coordinates; allow last-ulp rounding
    match p.data().iter().find(|v| v.abs() > 1.0 + 1e-12) {
        Some(v) => Err(Error::Contract(format!("phase {v} outside [-1, 1]"))),
        None => Ok(()),
    }
}

/// Graph-level phase pooling: returns `(m, p)` nodes.
pub fn phase_pool_node(g: &mut Graph, z: NodeId, spec: &PoolSpec) -> Result<(NodeId, NodeId)> {
    let m = g.apply(SoftMaxPool { spec: *spec }, &[z])?;
    let p = g.apply(SoftArgmaxPool { spec: *spec }, &[z])?;
    assert_phase_range(g.value(p))?;
    Ok((m, p))
}

pub fn unpool_node(
    g: &mut Graph,
    m: NodeId,
    p: NodeId,
    spec: &PoolSpec,
    output_shape: [usize; 3],
) -> Result<NodeId> {
    g.apply(
        Unpool {
            spec: *spec,
            output_shape,
        },
        &[m, p],
    )
}
