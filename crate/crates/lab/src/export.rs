//! Similarity matrices as CSV and 8-bit PGM heatmaps.

use std::fs;
use std::io;
use std::path::Path;

use tima_core::harness::{MatrixSet, SimilarityMatrices};
use tima_core::tensor::Tensor;

use crate::config::PixelFraction;
use crate::report::MatrixFile;

/// One row per line, values in shortest round-trip decimal.
pub fn matrix_csv(m: &Tensor) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(f64::to_string).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Maps [−1, 1] linearly onto [0, 255]; values outside are clamped.
pub fn heat_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Binary grayscale (P5), one pixel per entry.
pub fn matrix_pgm(m: &Tensor) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.cols(), m.rows()).into_bytes();
    out.extend(m.data().iter().map(|&v| heat_byte(v)));
    out
}

/// Writes `<dir>/<name>.csv` and `<dir>/<name>.pgm`; the manifest paths are
/// `<rel>/<name>.*` so reports do not depend on where the run lives.
fn write_matrix(m: &Tensor, dir: &Path, rel: &str, name: &str) -> io::Result<MatrixFile> {
    fs::write(dir.join(format!("{name}.csv")), matrix_csv(m))?;
    fs::write(dir.join(format!("{name}.pgm")), matrix_pgm(m))?;
    Ok(MatrixFile {
        name: name.to_string(),
        csv: format!("{rel}/{name}.csv"),
        pgm: format!("{rel}/{name}.pgm"),
    })
}

fn write_set(
    set: &MatrixSet,
    who: &str,
    radii: &[PixelFraction],
    dir: &Path,
    rel: &str,
) -> io::Result<Vec<MatrixFile>> {
    let mut files = vec![
        write_matrix(&set.text_text, dir, rel, &format!("{who}_text_text"))?,
        write_matrix(&set.image_text, dir, rel, &format!("{who}_image_text"))?,
    ];
    for ((_, m), eps) in set.adversarial.iter().zip(radii) {
        files.push(write_matrix(
            m,
            dir,
            rel,
            &format!("{who}_adv_image_image_eps{}", eps.0),
        )?);
    }
    Ok(files)
}

/// Student then teacher: text-text, clean image-text, and one adversarial
/// image-image matrix per radius. `radii` must be the list the adversarial
/// matrices were computed for.
pub fn export_similarity_matrices(
    matrices: &SimilarityMatrices,
    radii: &[PixelFraction],
    dir: &Path,
    rel: &str,
) -> io::Result<Vec<MatrixFile>> {
    fs::create_dir_all(dir)?;
    let mut files = write_set(&matrices.student, "student", radii, dir, rel)?;
    files.extend(write_set(&matrices.teacher, "teacher", radii, dir, rel)?);
    Ok(files)
}
