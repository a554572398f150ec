use std::fs;
use std::path::Path;

use serde::Serialize;
use softpd::forward::Trajectory;

use crate::Failure;

pub fn write_csv<R, I>(path: &Path, header: &[&str], rows: R) -> Result<(), Failure>
where
    R: IntoIterator<Item = I>,
    I: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::Numerical(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Failure::Numerical(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(row).map_err(io)?;
    }
    w.flush().map_err(|e| Failure::Numerical(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("summaries always serialize");
    fs::write(path, text + "\n").map_err(|e| Failure::Numerical(format!("{}: {e}", path.display())))
}

/// One CSV per simulated frame, named `frame_NNNN.csv` after the step.
pub fn write_frames(dir: &Path, traj: &Trajectory) -> Result<Vec<String>, Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Numerical(format!("{}: {e}", dir.display())))?;
    let mut names = Vec::with_capacity(traj.records.len());
    for r in &traj.records {
        let name = format!("frame_{:04}.csv", r.step + 1);
        let rows = (0..r.x.len() / 3).map(|j| {
            let mut row = vec![j.to_string()];
            row.extend(r.x[3 * j..3 * j + 3].iter().chain(&r.v[3 * j..3 * j + 3]).map(|v| v.to_string()));
            row
        });
        write_csv(&dir.join(&name), &["node", "x", "y", "z", "vx", "vy", "vz"], rows)?;
        names.push(format!("frames/{name}"));
    }
    Ok(names)
}
