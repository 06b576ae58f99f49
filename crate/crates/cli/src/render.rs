//! Plain-text figure output: SVG diagram scatter plots and PGM heat maps.

use std::fmt::Write as _;

use topogen::io::DiagramFile;
use topogen::pimage::PersistenceImage;

const SIZE: f64 = 320.0;
const MARGIN: f64 = 32.0;
const COLORS: [&str; 4] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a"];

/// Birth on x, death on y, both over `[0, r_max]`. Essential classes sit on
/// the top edge as squares.
pub fn diagram_svg(file: &DiagramFile) -> String {
    let span = if file.r_max > 0.0 { file.r_max } else { 1.0 };
    let inner = SIZE - 2.0 * MARGIN;
    let x = |v: f64| MARGIN + inner * (v / span).clamp(0.0, 1.0);
    let y = |v: f64| SIZE - MARGIN - inner * (v / span).clamp(0.0, 1.0);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#);
    let _ = writeln!(s, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    let (lo, hi) = (MARGIN, SIZE - MARGIN);
    let _ = writeln!(s, r#"<path d="M{lo} {hi}H{hi}M{lo} {hi}V{lo}" stroke="black" fill="none"/>"#);
    let _ = writeln!(s, r#"<path d="M{lo} {hi}L{hi} {lo}" stroke="gray" stroke-dasharray="4 3" fill="none"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">birth</text>"#, SIZE / 2.0, SIZE - 8.0);
    let _ = writeln!(s, r#"<text x="12" y="{}" font-size="11" text-anchor="middle" transform="rotate(-90 12 {})">death</text>"#, SIZE / 2.0, SIZE / 2.0);
    let _ = writeln!(s, r#"<text x="{hi}" y="{}" font-size="10" text-anchor="end">r_max {:.4}</text>"#, hi + 14.0, file.r_max);
    for d in &file.diagrams {
        let color = COLORS[d.dimension % COLORS.len()];
        for &(b, de) in &d.pairs {
            let _ = writeln!(s, r#"<circle cx="{:.3}" cy="{:.3}" r="3" fill="{color}"/>"#, x(b), y(de));
        }
        for &b in &d.essential {
            let _ = writeln!(s, r#"<rect x="{:.3}" y="{:.3}" width="6" height="6" fill="{color}"/>"#, x(b) - 3.0, lo - 3.0);
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Binary PGM, brightest pixel at 255, persistence increasing upward.
pub fn image_pgm(img: &PersistenceImage) -> Vec<u8> {
    let n = img.n;
    let max = img.pixels.iter().fold(0.0f64, |a, &b| a.max(b));
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    for iy in (0..n).rev() {
        for ix in 0..n {
            let v = if max > 0.0 { img.at(ix, iy) / max } else { 0.0 };
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}
