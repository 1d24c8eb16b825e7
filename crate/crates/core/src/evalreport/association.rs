use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::embedstore::Grade;

/// Cramér's V for a 2x2 table, plain and bias-corrected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CramersV {
    pub plain: f64,
    pub corrected: f64,
    /// A row or column margin is zero; both values are reported as 0.
    pub degenerate: bool,
    pub table: [[u64; 2]; 2],
}

pub fn cramers_v_table(table: [[u64; 2]; 2]) -> CramersV {
    let n: u64 = table.iter().flatten().sum();
    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    if rows.contains(&0) || cols.contains(&0) {
        return CramersV {
            plain: 0.0,
            corrected: 0.0,
            degenerate: true,
            table,
        };
    }
    let nf = n as f64;
    let mut chi2 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let e = rows[i] as f64 * cols[j] as f64 / nf;
            let d = table[i][j] as f64 - e;
            chi2 += d * d / e;
        }
    }
    let phi2 = chi2 / nf;
    let corrected = if n > 1 {
        // r = k = 2: phi2 - (r-1)(k-1)/(n-1), r~ - 1 = 1 - 1/(n-1)
        let phi2c = (phi2 - 1.0 / (nf - 1.0)).max(0.0);
        let denom = 1.0 - 1.0 / (nf - 1.0);
        if denom > 0.0 {
            (phi2c / denom).sqrt().min(1.0)
        } else {
            0.0
        }
    } else {
        0.0
    };
    CramersV {
        plain: phi2.sqrt().min(1.0),
        corrected,
        degenerate: false,
        table,
    }
}

/// Association between slide grade (rows LG, HG) and a binary event
/// (columns no event, event).
pub fn cramers_v(grades: &[Grade], events: &[bool]) -> Result<CramersV, EvalError> {
    if grades.len() != events.len() {
        return Err(EvalError::CountMismatch {
            predicted: grades.len(),
            labels: events.len(),
        });
    }
    if grades.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut table = [[0u64; 2]; 2];
    for (g, &e) in grades.iter().zip(events) {
        table[g.index()][e as usize] += 1;
    }
    Ok(cramers_v_table(table))
}
