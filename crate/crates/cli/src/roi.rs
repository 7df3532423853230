//! Textual ROI selectors: per-axis half-open ranges and strides.

use inif_core::volume::AXES;

/// Parse "t0:t1,c0:c1,z0:z1,y0:y1,x0:x1"; "-" keeps the full axis.
pub fn parse_roi(
    s: &str,
    shape: &[usize; AXES],
) -> Result<([usize; AXES], [usize; AXES]), String> {
    let fields: Vec<&str> = s.split(',').collect();
    if fields.len() != AXES {
        return Err(format!(
            "roi needs {AXES} comma-separated fields, got {} in {s:?}",
            fields.len()
        ));
    }
    let mut lo = [0usize; AXES];
    let mut hi = *shape;
    for (a, field) in fields.iter().enumerate() {
        let field = field.trim();
        if field == "-" {
            continue;
        }
        let (l, h) = field
            .split_once(':')
            .ok_or_else(|| format!("roi field {field:?} is not \"lo:hi\" or \"-\""))?;
        lo[a] = l
            .trim()
            .parse()
            .map_err(|_| format!("bad roi bound {l:?}"))?;
        hi[a] = h
            .trim()
            .parse()
            .map_err(|_| format!("bad roi bound {h:?}"))?;
        if lo[a] >= hi[a] {
            return Err(format!("empty roi range {field:?}"));
        }
    }
    Ok((lo, hi))
}

/// Parse "1,1,1,4,4" into per-axis strides.
pub fn parse_stride(s: &str) -> Result<[usize; AXES], String> {
    let fields: Vec<&str> = s.split(',').collect();
    if fields.len() != AXES {
        return Err(format!(
            "stride needs {AXES} comma-separated fields, got {} in {s:?}",
            fields.len()
        ));
    }
    let mut stride = [1usize; AXES];
    for (a, field) in fields.iter().enumerate() {
        stride[a] = field
            .trim()
            .parse()
            .map_err(|_| format!("bad stride {field:?}"))?;
        if stride[a] == 0 {
            return Err("stride must be positive".into());
        }
    }
    Ok(stride)
}
