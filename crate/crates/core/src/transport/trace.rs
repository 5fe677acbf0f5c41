//! Exact voxel traversal (Amanatides–Woo) of a segment through a phantom.

use crate::phantom::VoxelPhantom;

#[inline]
pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub(crate) fn axpy(p: [f64; 3], d: [f64; 3], t: f64) -> [f64; 3] {
    [p[0] + d[0] * t, p[1] + d[1] * t, p[2] + d[2] * t]
}

/// Parametric interval `[t_in, t_out]` where `p + t·d` lies in the box, or
/// `None` if the line misses it. `t` is unbounded.
pub(crate) fn box_interval(p: [f64; 3], d: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if d[a] == 0.0 {
            if p[a] < lo[a] || p[a] > hi[a] {
                return None;
            }
        } else {
            let inv = 1.0 / d[a];
            let ta = (lo[a] - p[a]) * inv;
            let tb = (hi[a] - p[a]) * inv;
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    (t0 < t1).then_some((t0, t1))
}

/// Visit every voxel crossed by the segment `p0 → p1`, calling
/// `visit(voxel_index, length_mm)`. Rays running exactly along voxel faces
/// are assigned to one side consistently; lengths always sum to the clipped
/// segment length.
pub fn traverse(ph: &VoxelPhantom, p0: [f64; 3], p1: [f64; 3], mut visit: impl FnMut(usize, f64)) {
    let d = sub(p1, p0);
    let len = norm(d);
    if len == 0.0 {
        return;
    }
    let (lo, hi) = ph.bounds();
    let Some((a, b)) = box_interval(p0, d, lo, hi) else {
        return;
    };
    let t0 = a.max(0.0);
    let t1 = b.min(1.0);
    if t0 >= t1 {
        return;
    }
    let vs = ph.voxel_size;
    let n = ph.dims;
    // Locate the entry voxel from a point just inside the clipped segment.
    let probe = axpy(p0, d, t0 + 1e-9 * (t1 - t0));
    let mut idx = [0isize; 3];
    let mut step = [0isize; 3];
    let mut t_next = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for ax in 0..3 {
        let i = ((probe[ax] - lo[ax]) / vs).floor() as isize;
        idx[ax] = i.clamp(0, n[ax] as isize - 1);
        if d[ax] > 0.0 {
            step[ax] = 1;
            let boundary = lo[ax] + (idx[ax] + 1) as f64 * vs;
            t_next[ax] = (boundary - p0[ax]) / d[ax];
            t_delta[ax] = vs / d[ax];
        } else if d[ax] < 0.0 {
            step[ax] = -1;
            let boundary = lo[ax] + idx[ax] as f64 * vs;
            t_next[ax] = (boundary - p0[ax]) / d[ax];
            t_delta[ax] = -vs / d[ax];
        }
    }
    let mut t = t0;
    loop {
        let ax = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
            0
        } else if t_next[1] <= t_next[2] {
            1
        } else {
            2
        };
        let tn = t_next[ax].min(t1);
        if tn > t {
            let i = idx[0] as usize + n[0] * (idx[1] as usize + n[1] * idx[2] as usize);
            visit(i, (tn - t) * len);
            t = tn;
        }
        if tn >= t1 {
            break;
        }
        idx[ax] += step[ax];
        if idx[ax] < 0 || idx[ax] >= n[ax] as isize {
            break;
        }
        t_next[ax] += t_delta[ax];
    }
}
