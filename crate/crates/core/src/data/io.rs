use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::InputShape;

fn load_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

struct Idx {
    kind: u8,
    dims: Vec<usize>,
    values: Vec<f64>,
}

fn read_idx(path: &Path) -> Result<Idx> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 {
        return Err(load_err(path, "truncated header at byte offset 0"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(load_err(path, "bad magic at byte offset 0"));
    }
    let kind = bytes[2];
    let ndim = bytes[3] as usize;
    let width = match kind {
        0x08 | 0x09 => 1,
        0x0B => 2,
        0x0C | 0x0D => 4,
        0x0E => 8,
        other => return Err(load_err(path, format!("unknown element type 0x{other:02X} at byte offset 2"))),
    };
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(load_err(path, format!("truncated dimension table at byte offset {}", bytes.len())));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|d| {
            let o = 4 + 4 * d;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let count: usize = dims.iter().product();
    let expected = header + count * width;
    if bytes.len() != expected {
        return Err(load_err(
            path,
            format!(
                "payload ends at byte offset {} but dimensions {dims:?} need {expected} bytes",
                bytes.len()
            ),
        ));
    }
    let body = &bytes[header..];
    let values = body
        .chunks_exact(width)
        .map(|c| match kind {
            0x08 => c[0] as f64,
            0x09 => c[0] as i8 as f64,
            0x0B => i16::from_be_bytes([c[0], c[1]]) as f64,
            0x0C => i32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64,
            0x0D => f32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64,
            _ => f64::from_be_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]),
        })
        .collect::<Vec<_>>();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(load_err(path, format!("non-finite value at byte offset {}", header + pos * width)));
    }
    Ok(Idx { kind, dims, values })
}

/// Loads an IDX image/label file pair. Unsigned-byte images are scaled to
/// `[0, 1]`; other element types are taken as-is.
pub fn load_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let mut img = read_idx(images)?;
    if img.kind == 0x08 {
        img.values.iter_mut().for_each(|v| *v /= 255.0);
    }
    let shape = match img.dims[..] {
        [_, f] => InputShape::Flat { features: f },
        [_, h, w] => InputShape::Image {
            channels: 1,
            height: h,
            width: w,
        },
        [_, c, h, w] => InputShape::Image {
            channels: c,
            height: h,
            width: w,
        },
        _ => return Err(load_err(images, format!("unsupported image rank {}", img.dims.len()))),
    };
    let lab = read_idx(labels)?;
    if lab.dims.len() != 1 {
        return Err(load_err(labels, format!("labels must be one-dimensional, got {:?}", lab.dims)));
    }
    if lab.dims[0] != img.dims[0] {
        return Err(load_err(
            labels,
            format!("{} labels for {} images", lab.dims[0], img.dims[0]),
        ));
    }
    let mut ys = Vec::with_capacity(lab.values.len());
    for (i, v) in lab.values.into_iter().enumerate() {
        if v < 0.0 || v.fract() != 0.0 || v as usize >= num_classes {
            return Err(load_err(labels, format!("label {v} of sample {i} outside [0, {num_classes})")));
        }
        ys.push(v as usize);
    }
    Dataset::new(shape, img.values, ys, num_classes)
}

/// Loads `label,feature,...` rows without a header as a flat dataset.
pub fn load_csv(path: &Path, num_classes: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| load_err(path, e.to_string()))?;
    let mut features = None;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 1;
        let record = record.map_err(|e| load_err(path, format!("line {line}: {e}")))?;
        if record.len() < 2 {
            return Err(load_err(path, format!("line {line}: expected a label and at least one feature")));
        }
        let width = record.len() - 1;
        match features {
            None => features = Some(width),
            Some(f) if f != width => {
                return Err(load_err(path, format!("line {line}: {width} features, expected {f}")));
            }
            _ => {}
        }
        let label: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| load_err(path, format!("line {line}: bad label {:?}", &record[0])))?;
        if label >= num_classes {
            return Err(load_err(path, format!("line {line}: label {label} outside [0, {num_classes})")));
        }
        labels.push(label);
        for field in record.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| load_err(path, format!("line {line}: bad value {field:?}")))?;
            if !v.is_finite() {
                return Err(load_err(path, format!("line {line}: non-finite value")));
            }
            inputs.push(v);
        }
    }
    let features = features.ok_or_else(|| load_err(path, "no rows"))?;
    Dataset::new(InputShape::Flat { features }, inputs, labels, num_classes)
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn idx_file(kind: u8, dims: &[u32], body: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(&[0, 0, kind, dims.len() as u8]).unwrap();
        for d in dims {
            f.write_all(&d.to_be_bytes()).unwrap();
        }
        f.write_all(body).unwrap();
        f
    }

    #[test]
    fn reads_byte_images() {
        let img = idx_file(0x08, &[2, 2, 2], &[0, 255, 51, 102, 255, 0, 0, 0]);
        let lab = idx_file(0x08, &[2], &[3, 1]);
        let ds = load_idx(img.path(), lab.path(), 10).unwrap();
        assert_eq!(
            ds.shape,
            InputShape::Image {
                channels: 1,
                height: 2,
                width: 2
            }
        );
        assert_eq!(ds.labels, vec![3, 1]);
        assert_eq!(ds.inputs[..4], [0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn reads_float_features() {
        let body: Vec<u8> = [0.5f32, -1.0, 2.0].iter().flat_map(|v| v.to_be_bytes()).collect();
        let img = idx_file(0x0D, &[1, 3], &body);
        let lab = idx_file(0x08, &[1], &[0]);
        let ds = load_idx(img.path(), lab.path(), 2).unwrap();
        assert_eq!(ds.shape, InputShape::Flat { features: 3 });
        assert_eq!(ds.inputs, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn idx_errors_name_the_offset() {
        let img = idx_file(0x08, &[2, 2], &[1, 2, 3]);
        let lab = idx_file(0x08, &[2], &[0, 1]);
        let err = load_idx(img.path(), lab.path(), 2).unwrap_err().to_string();
        assert!(err.contains("byte offset 15"), "{err}");

        let img = idx_file(0x07, &[1, 1], &[0]);
        let err = load_idx(img.path(), lab.path(), 2).unwrap_err().to_string();
        assert!(err.contains("byte offset 2"), "{err}");

        let img = idx_file(0x08, &[2, 1], &[0, 0]);
        let lab = idx_file(0x08, &[2], &[0, 5]);
        assert!(load_idx(img.path(), lab.path(), 2).is_err());
    }

    #[test]
    fn reads_csv_rows() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "1,0.5,0.25\n0,1.0,0.0").unwrap();
        let ds = load_csv(f.path(), 2).unwrap();
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.inputs, vec![0.5, 0.25, 1.0, 0.0]);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "1,0.5,0.25\n0,oops,0.0").unwrap();
        let err = load_csv(f.path(), 2).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");

        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "1,0.5\n7,0.1").unwrap();
        let err = load_csv(f.path(), 2).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
