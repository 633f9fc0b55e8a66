//! Correspondence files: CSV with header `x1,y1,x2,y2[,point_id]`, pixel
//! coordinates in the top-left-origin convention.

use std::path::Path;

use super::{atomic_write, read_file, Result, TensorIoError};
use crate::geometry::Correspondence;

#[derive(Debug, Clone, PartialEq)]
pub struct RejectedRow {
    /// 1-based line number in the file (the header is line 1).
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceFile {
    pub corrs: Vec<Correspondence>,
    pub rejected: Vec<RejectedRow>,
}

fn in_bounds(x: f64, y: f64, (w, h): (u32, u32)) -> bool {
    x >= 0.0 && y >= 0.0 && x < f64::from(w) && y < f64::from(h)
}

/// Parses correspondence CSV text. Rows with a point outside the image are
/// skipped and reported; malformed rows abort with their line number.
/// Without a `point_id` column, ids are the 0-based data row index.
pub fn parse_correspondences(text: &str, image_size: (u32, u32)) -> Result<CorrespondenceFile> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let parse_err = |line: u64, message: String| TensorIoError::Parse { line, message };
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let names: Vec<&str> = headers.iter().collect();
    let with_id = match names.as_slice() {
        ["x1", "y1", "x2", "y2"] => false,
        ["x1", "y1", "x2", "y2", "point_id"] => true,
        _ => {
            return Err(parse_err(
                1,
                format!(
                    "expected header x1,y1,x2,y2[,point_id], got {}",
                    names.join(",")
                ),
            ))
        }
    };
    let mut out = CorrespondenceFile::default();
    for (row_index, record) in reader.records().enumerate() {
        let line = row_index as u64 + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            let field = record.get(i).unwrap_or_default();
            field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    parse_err(
                        line,
                        format!("field {} is not a finite number: {field:?}", i + 1),
                    )
                })
        };
        let (x1, y1, x2, y2) = (num(0)?, num(1)?, num(2)?, num(3)?);
        let point_id = if with_id {
            let field = record.get(4).unwrap_or_default();
            field
                .parse::<u64>()
                .map_err(|_| parse_err(line, format!("point_id is not an integer: {field:?}")))?
        } else {
            row_index as u64
        };
        if !in_bounds(x1, y1, image_size) {
            out.rejected.push(RejectedRow {
                line,
                reason: format!("view-1 point ({x1}, {y1}) out of bounds"),
            });
        } else if !in_bounds(x2, y2, image_size) {
            out.rejected.push(RejectedRow {
                line,
                reason: format!("view-2 point ({x2}, {y2}) out of bounds"),
            });
        } else {
            out.corrs
                .push(Correspondence::new(x1, y1, x2, y2, point_id));
        }
    }
    Ok(out)
}

pub fn read_correspondences(path: &Path, image_size: (u32, u32)) -> Result<CorrespondenceFile> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| TensorIoError::Parse {
        line: 0,
        message: e.to_string(),
    })?;
    parse_correspondences(&text, image_size)
}

/// Serializes with shortest round-trip float formatting.
pub fn format_correspondences(corrs: &[Correspondence]) -> String {
    let mut s = String::from("x1,y1,x2,y2,point_id\n");
    for c in corrs {
        s.push_str(&format!(
            "{:?},{:?},{:?},{:?},{}\n",
            c.x1.x, c.x1.y, c.x2.x, c.x2.y, c.point_id
        ));
    }
    s
}

pub fn write_correspondences(path: &Path, corrs: &[Correspondence]) -> Result<()> {
    atomic_write(path, format_correspondences(corrs).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIZE: (u32, u32) = (518, 518);

    #[test]
    fn two_valid_rows() {
        let f = parse_correspondences("x1,y1,x2,y2\n1,2,3,4\n5.5,6,7,8\n", SIZE).unwrap();
        assert_eq!(f.corrs.len(), 2);
        assert_eq!(f.corrs[1], Correspondence::new(5.5, 6.0, 7.0, 8.0, 1));
        assert!(f.rejected.is_empty());
    }

    #[test]
    fn out_of_bounds_row_is_reported() {
        let f =
            parse_correspondences("x1,y1,x2,y2,point_id\n600,2,3,4,9\n1,1,1,1,10\n", SIZE).unwrap();
        assert_eq!(f.corrs.len(), 1);
        assert_eq!(f.corrs[0].point_id, 10);
        assert_eq!(f.rejected.len(), 1);
        assert_eq!(f.rejected[0].line, 2);
    }

    #[test]
    fn header_only_is_empty() {
        let f = parse_correspondences("x1,y1,x2,y2\n", SIZE).unwrap();
        assert!(f.corrs.is_empty() && f.rejected.is_empty());
    }

    #[test]
    fn malformed_rows_carry_line_numbers() {
        let err = parse_correspondences("x1,y1,x2,y2\n1,2,3,4\n1,abc,3,4\n", SIZE).unwrap_err();
        assert!(
            matches!(err, TensorIoError::Parse { line: 3, .. }),
            "{err:?}"
        );
        let err = parse_correspondences("x1,y1,x2,y2\n1,2,3\n", SIZE).unwrap_err();
        assert!(
            matches!(err, TensorIoError::Parse { line: 2, .. }),
            "{err:?}"
        );
        let err = parse_correspondences("a,b,c,d\n", SIZE).unwrap_err();
        assert!(matches!(err, TensorIoError::Parse { line: 1, .. }));
        let err = parse_correspondences("x1,y1,x2,y2\nNaN,1,1,1\n", SIZE).unwrap_err();
        assert!(matches!(err, TensorIoError::Parse { line: 2, .. }));
    }

    #[test]
    fn format_round_trips_exactly() {
        let corrs = vec![Correspondence::new(0.1, 517.999_999_9, 1.0 / 3.0, 2.0, 42)];
        let back = parse_correspondences(&format_correspondences(&corrs), SIZE).unwrap();
        assert_eq!(back.corrs, corrs);
    }
}
