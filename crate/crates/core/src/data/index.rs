//! Dataset index: a TSV of `path, box, quad, tag` rows under a version
//! header.

use std::fmt::Write as _;
use std::path::Path;

use super::{ppm, DataError, Sample};
use crate::geom::{BoxXYXY, Quad};

pub const INDEX_HEADER: &str = "#stlpd-index v1";
pub const INDEX_FILE: &str = "index.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct IndexRow {
    /// Image path relative to the index directory.
    pub path: String,
    pub gt_box: BoxXYXY,
    pub gt_quad: Quad,
    pub tag: String,
}

fn join(values: &[f32]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn format_index(rows: &[IndexRow]) -> String {
    let mut out = String::from(INDEX_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.path,
            join(&r.gt_box.as_array()),
            join(&r.gt_quad.flat()),
            r.tag
        );
    }
    out
}

fn parse_floats<const N: usize>(field: &str, what: &str) -> Result<[f32; N], String> {
    let parts: Vec<&str> = field.split(',').collect();
    if parts.len() != N {
        return Err(format!("{what} needs {N} comma-separated values, got {}", parts.len()));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .trim()
            .parse::<f32>()
            .map_err(|_| format!("{what}: `{p}` is not a number"))?;
    }
    Ok(out)
}

pub fn parse_index(text: &str, path: &Path) -> Result<Vec<IndexRow>, DataError> {
    let fail = |line: usize, msg: String| DataError::Index {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == INDEX_HEADER => {}
        Some(h) => return Err(fail(1, format!("unsupported header `{h}`, expected `{INDEX_HEADER}`"))),
        None => return Err(fail(1, "missing header".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(fail(lineno, format!("expected 4 tab-separated fields, got {}", fields.len())));
        }
        let b = parse_floats::<4>(fields[1], "box").map_err(|m| fail(lineno, m))?;
        let q = parse_floats::<8>(fields[2], "quad").map_err(|m| fail(lineno, m))?;
        let gt_box = BoxXYXY::new(b[0], b[1], b[2], b[3]).map_err(|e| fail(lineno, e.to_string()))?;
        let gt_quad = Quad::from_flat(q).map_err(|e| fail(lineno, e.to_string()))?;
        rows.push(IndexRow {
            path: fields[0].to_string(),
            gt_box,
            gt_quad,
            tag: fields[3].to_string(),
        });
    }
    Ok(rows)
}

/// Writes `dir/index.tsv`.
pub fn write_index(dir: &Path, rows: &[IndexRow]) -> Result<(), DataError> {
    let path = dir.join(INDEX_FILE);
    std::fs::write(&path, format_index(rows)).map_err(|e| DataError::io(path, e))
}

/// Reads `dir/index.tsv`.
pub fn read_index(dir: &Path) -> Result<Vec<IndexRow>, DataError> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    parse_index(&text, &path)
}

/// Writes every sample as `NNNNNN.ppm` plus the index. Returns the rows.
pub fn save_samples(dir: &Path, samples: &[Sample]) -> Result<Vec<IndexRow>, DataError> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:06}.ppm");
        ppm::write_ppm(&dir.join(&name), &s.image)?;
        rows.push(IndexRow {
            path: name,
            gt_box: s.gt_box,
            gt_quad: s.gt_quad,
            tag: s.tag.clone(),
        });
    }
    write_index(dir, &rows)?;
    Ok(rows)
}

/// Loads every indexed image. The sample source is the row path.
pub fn load_samples(dir: &Path) -> Result<Vec<Sample>, DataError> {
    read_index(dir)?
        .into_iter()
        .map(|row| {
            Ok(Sample {
                image: ppm::read_ppm(&dir.join(&row.path))?,
                gt_box: row.gt_box,
                gt_quad: row.gt_quad,
                tag: row.tag,
                source: row.path,
                params: None,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_header_only() {
        assert_eq!(format_index(&[]), "#stlpd-index v1\n");
        assert!(parse_index("#stlpd-index v1\n", Path::new("x")).unwrap().is_empty());
    }

    #[test]
    fn hand_written_fixture() {
        let text = "#stlpd-index v1\n\
                    img/0.ppm\t10,20,40,30\t10,20,40,20,40,30,10,30\tbase\n\
                    img/1.ppm\t1.5,2,9,6.25\t9,6.25,1.5,5,2,2,8.5,2\trotate\n";
        let rows = parse_index(text, Path::new("index.tsv")).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].gt_box, BoxXYXY::new(10., 20., 40., 30.).unwrap());
        assert_eq!(rows[1].tag, "rotate");
        // corners are canonicalized on read
        assert_eq!(rows[1].gt_quad.points()[0], [2.0, 2.0]);
        assert_eq!(rows[1].gt_quad.points()[2], [9.0, 6.25]);
    }

    #[test]
    fn errors_report_line_numbers() {
        match parse_index("#stlpd-index v2\n", Path::new("i")) {
            Err(DataError::Index { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        let bad = "#stlpd-index v1\na.ppm\t0,0,1,1\t0,0,1,0,1,1,0,1\tbase\nb.ppm\t0,0,1\t0,0,1,0,1,1,0,1\tbase\n";
        match parse_index(bad, Path::new("i")) {
            Err(DataError::Index { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
