use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::inference::Extraction;
use crate::numkernel::Tensor2;
use crate::subword::{PieceKind, TokenSeq};

/// Shortest exact-enough text for a probability: 17 significant digits.
pub fn fmt_value(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn matrix_csv(m: &Tensor2) -> String {
    let mut s = String::with_capacity(m.len() * 24);
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|&v| fmt_value(v)).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn tokens_csv(seq: &TokenSeq) -> String {
    let mut s = String::from("index,piece,kind,continuation,char_start,char_end\n");
    for i in 0..seq.len() {
        let kind = match seq.kinds()[i] {
            PieceKind::Cls => "cls",
            PieceKind::Sep => "sep",
            PieceKind::Query => "query",
            PieceKind::Text => "text",
        };
        let (a, b) = seq
            .span(i)
            .map_or((String::new(), String::new()), |(a, b)| (a.to_string(), b.to_string()));
        let piece = seq.pieces()[i].replace('"', "\"\"");
        writeln!(
            s,
            "{i},\"{piece}\",{kind},{},{a},{b}",
            seq.continuation()[i]
        )
        .unwrap();
    }
    s
}

/// Writes `tokens.csv`, `s.csv`, `e.csv` and, when the heads produce them,
/// `m.csv` and `attention.csv` into `dir`. `s` and `e` are `l x 1`.
pub fn dump_matrices(dir: &Path, seq: &TokenSeq, x: &Extraction) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("tokens.csv"), tokens_csv(seq))?;
    fs::write(dir.join("s.csv"), matrix_csv(&Tensor2::col_vector(&x.s)))?;
    fs::write(dir.join("e.csv"), matrix_csv(&Tensor2::col_vector(&x.e)))?;
    if let Some(m) = &x.m {
        fs::write(dir.join("m.csv"), matrix_csv(m))?;
    }
    if let Some(a) = &x.attention {
        fs::write(dir.join("attention.csv"), matrix_csv(a))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_round_trip_exactly() {
        for v in [0.0, 1.0, 0.1, 1.0 / 3.0, 0.8804970779778824, 1e-300] {
            let back: f64 = fmt_value(v).parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn matrix_layout_is_row_major() {
        let m = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let csv = matrix_csv(&m);
        let rows: Vec<Vec<f64>> = csv
            .lines()
            .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows, vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
    }
}
