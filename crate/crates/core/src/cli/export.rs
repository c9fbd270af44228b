use crate::attention::AttentionMatrix;

/// One CSV line per row, no header, values at full precision.
pub fn matrix_csv(m: &AttentionMatrix) -> String {
    let mut out = String::new();
    for i in 0..m.size {
        let row: Vec<String> = m.row(i).iter().map(f64::to_string).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Plain (P2) graymap with maxval 255 and pixel `round(255·v / max v)`.
/// An all-zero matrix renders black.
pub fn matrix_pgm(m: &AttentionMatrix) -> String {
    let max = m.values.iter().copied().fold(0.0, f64::max);
    let mut out = format!("P2\n{} {}\n255\n", m.size, m.size);
    for i in 0..m.size {
        let row: Vec<String> = m
            .row(i)
            .iter()
            .map(|&v| {
                let px = if max > 0.0 { (255.0 * v / max).round() } else { 0.0 };
                (px as u8).to_string()
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_bytes() {
        let m = AttentionMatrix {
            head: 0,
            size: 2,
            values: vec![1.0, 0.0, 0.25, 0.5],
        };
        assert_eq!(matrix_pgm(&m), "P2\n2 2\n255\n255 0\n64 128\n");
        assert_eq!(matrix_csv(&m), "1,0\n0.25,0.5\n");
    }
}
