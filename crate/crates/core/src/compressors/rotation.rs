//! Hadamard rotation of a layer: stored weights become `H_out W H_in^T`,
//! inputs are rotated by `H_in` and outputs rotated back by `H_out^T`, so an
//! unquantized rotated layer computes the same product as the original.

use crate::error::Result;
use crate::linalg::{hadamard, matmul, Matrix};

pub fn rotate_weight(w: &Matrix) -> Result<Matrix> {
    let h_out = hadamard(w.rows())?;
    let h_in = hadamard(w.cols())?;
    matmul(&matmul(&h_out, w)?, &h_in.transpose())
}

pub fn unrotate_weight(r: &Matrix) -> Result<Matrix> {
    let h_out = hadamard(r.rows())?;
    let h_in = hadamard(r.cols())?;
    matmul(&matmul(&h_out.transpose(), r)?, &h_in)
}

pub fn rotate_input(x: &Matrix) -> Result<Matrix> {
    matmul(&hadamard(x.rows())?, x)
}

pub fn unrotate_output(y: &Matrix) -> Result<Matrix> {
    matmul(&hadamard(y.rows())?.transpose(), y)
}
