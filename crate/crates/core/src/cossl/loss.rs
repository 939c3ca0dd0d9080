use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var, COSINE_EPS};

fn rows_of<T: Scalar>(tape: &Tape<T>, v: Var, what: &str) -> Result<(usize, usize)> {
    match *tape.shape(v)? {
        [r, d] => Ok((r, d)),
        ref s => Err(Error::shape(format!("{what} must be R×D rows, got {s:?}"))),
    }
}

fn grid_of<T: Scalar>(tape: &Tape<T>, v: Var, what: &str) -> Result<[usize; 4]> {
    match *tape.shape(v)? {
        [n, d, h, w] => Ok([n, d, h, w]),
        ref s => Err(Error::shape(format!("{what} must be N×D×n×n, got {s:?}"))),
    }
}

/// `−2 · mean_rows cos(p, sg(z))`.
pub fn loss_global<T: Scalar>(tape: &mut Tape<T>, p: Var, z: Var) -> Result<Var> {
    rows_of(tape, p, "prediction")?;
    rows_of(tape, z, "target projection")?;
    let z = tape.detach(z)?;
    let c = tape.cosine_rows(p, z, T::of(COSINE_EPS))?;
    let m = tape.mean(c)?;
    tape.scale(m, T::of(-2.0))
}

/// Local-to-global loss for grids of per-cell embeddings:
/// `−(2/n²) Σ_i [cos(p^i, sg(z_g)) + cos(p_g, sg(z^i))]`, averaged over the batch.
///
/// `p_local` and `z_local` are N×D×n×n; `p_g` and `z_g` are N×D.
pub fn loss_local<T: Scalar>(tape: &mut Tape<T>, p_local: Var, p_g: Var, z_local: Var, z_g: Var) -> Result<Var> {
    let [n, d, h, w] = grid_of(tape, p_local, "local prediction grid")?;
    let [zn, zd, zh, zw] = grid_of(tape, z_local, "local target grid")?;
    if (h, w) != (zh, zw) {
        return Err(Error::shape(format!("grid sides differ: {h}×{w} vs {zh}×{zw}")));
    }
    if (n, d) != (zn, zd) {
        return Err(Error::shape(format!("local grids differ in batch or width: {n}×{d} vs {zn}×{zd}")));
    }
    for (v, what) in [(p_g, "global prediction"), (z_g, "global target projection")] {
        if rows_of(tape, v, what)? != (n, d) {
            return Err(Error::shape(format!("{what} must be {n}×{d}")));
        }
    }
    let cells = h * w;
    let eps = T::of(COSINE_EPS);

    let p_rows = tape.grid_to_rows(p_local)?;
    let z_g = tape.detach(z_g)?;
    let z_g_rep = tape.repeat_rows(z_g, cells)?;
    let a = tape.cosine_rows(p_rows, z_g_rep, eps)?;

    let z_rows = tape.grid_to_rows(z_local)?;
    let z_rows = tape.detach(z_rows)?;
    let p_g_rep = tape.repeat_rows(p_g, cells)?;
    let b = tape.cosine_rows(p_g_rep, z_rows, eps)?;

    let ma = tape.mean(a)?;
    let mb = tape.mean(b)?;
    let s = tape.add(ma, mb)?;
    tape.scale(s, T::of(-2.0))
}

/// Average-pool an N×D×n×n grid down to `target_cells` cells. The target side
/// must divide `n`; `target_cells = n²` is the identity.
pub fn downsample_local_grid<T: Scalar>(tape: &mut Tape<T>, grid: Var, target_cells: usize) -> Result<Var> {
    let [_, _, h, w] = grid_of(tape, grid, "local grid")?;
    if h != w {
        return Err(Error::shape(format!("local grid must be square, got {h}×{w}")));
    }
    let side = (target_cells as f64).sqrt().round() as usize;
    if side == 0 || side * side != target_cells || h % side != 0 {
        return Err(Error::invalid(format!("cannot downsample a {h}×{h} grid to {target_cells} cells")));
    }
    if side == h {
        return Ok(grid);
    }
    let k = h / side;
    tape.avg_pool(grid, k, k, 0)
}
