//! MetaImage (.mha/.mhd) reader and writer.
//!
//! Written headers carry exactly: `NDims`, `DimSize`, `ElementSpacing`,
//! `Offset`, `ElementType` (`MET_FLOAT` or `MET_USHORT`),
//! `ElementNumberOfChannels` (only for vector fields),
//! `ElementByteOrderMSB=False` and `ElementDataFile`. The payload is
//! little-endian raw, appended in the same file (`ElementDataFile = LOCAL`).
//! Readers ignore unknown keys and also accept an external raw file
//! referenced relative to the header.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::Field3;
use crate::geom::Geometry;
use crate::volgrid::Grid3;
use crate::{DisplacementField, LabelGrid, VolumeGrid};

const ELEMENT_FLOAT: &str = "MET_FLOAT";
const ELEMENT_USHORT: &str = "MET_USHORT";

pub fn write_volume(path: &Path, v: &VolumeGrid) -> Result<()> {
    let mut payload = Vec::with_capacity(v.data().len() * 4);
    for x in v.data() {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    write_metaimage(path, v.geometry(), ELEMENT_FLOAT, 1, &payload)
}

pub fn write_labels(path: &Path, l: &LabelGrid) -> Result<()> {
    let mut payload = Vec::with_capacity(l.data().len() * 2);
    for x in l.data() {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    write_metaimage(path, l.geometry(), ELEMENT_USHORT, 1, &payload)
}

pub fn write_field(path: &Path, f: &DisplacementField) -> Result<()> {
    let mut payload = Vec::with_capacity(f.data().len() * 12);
    for v in f.data() {
        for c in v {
            payload.extend_from_slice(&c.to_le_bytes());
        }
    }
    write_metaimage(path, f.geometry(), ELEMENT_FLOAT, 3, &payload)
}

pub fn read_volume(path: &Path) -> Result<VolumeGrid> {
    let (geom, payload) = read_metaimage(path, ELEMENT_FLOAT, 1)?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let grid = Grid3::new(geom, data)?;
    grid.check_finite(&path.display().to_string())?;
    Ok(grid)
}

pub fn read_labels(path: &Path) -> Result<LabelGrid> {
    let (geom, payload) = read_metaimage(path, ELEMENT_USHORT, 1)?;
    let data: Vec<u16> = payload
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    Grid3::new(geom, data)
}

pub fn read_field(path: &Path) -> Result<DisplacementField> {
    let (geom, payload) = read_metaimage(path, ELEMENT_FLOAT, 3)?;
    let data: Vec<[f32; 3]> = payload
        .chunks_exact(12)
        .map(|b| {
            [
                f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
                f32::from_le_bytes([b[4], b[5], b[6], b[7]]),
                f32::from_le_bytes([b[8], b[9], b[10], b[11]]),
            ]
        })
        .collect();
    Field3::new(geom, data)
}

fn write_metaimage(
    path: &Path,
    geom: &Geometry,
    element_type: &str,
    channels: usize,
    payload: &[u8],
) -> Result<()> {
    let mut header = String::new();
    header.push_str("NDims = 3\n");
    header.push_str(&format!(
        "DimSize = {} {} {}\n",
        geom.dims[0], geom.dims[1], geom.dims[2]
    ));
    header.push_str(&format!(
        "ElementSpacing = {} {} {}\n",
        geom.spacing[0], geom.spacing[1], geom.spacing[2]
    ));
    header.push_str(&format!(
        "Offset = {} {} {}\n",
        geom.origin[0], geom.origin[1], geom.origin[2]
    ));
    if channels != 1 {
        header.push_str(&format!("ElementNumberOfChannels = {channels}\n"));
    }
    header.push_str(&format!("ElementType = {element_type}\n"));
    header.push_str("ElementByteOrderMSB = False\n");
    header.push_str("ElementDataFile = LOCAL\n");

    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(header.as_bytes())
        .and_then(|_| file.write_all(payload))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_metaimage(
    path: &Path,
    expect_type: &str,
    expect_channels: usize,
) -> Result<(Geometry, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let display = path.display().to_string();

    // header = lines up to and including ElementDataFile
    let mut keys: BTreeMap<String, String> = BTreeMap::new();
    let mut cursor = 0usize;
    let mut data_file: Option<String> = None;
    while cursor < bytes.len() {
        let line_end = bytes[cursor..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| cursor + p)
            .unwrap_or(bytes.len());
        let line = std::str::from_utf8(&bytes[cursor..line_end])
            .map_err(|_| Error::format(&display, "non-UTF8 header"))?
            .trim()
            .to_string();
        cursor = line_end + 1;
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .ok_or_else(|| Error::format(&display, format!("malformed header line: {line}")))?;
        if key == "ElementDataFile" {
            data_file = Some(value);
            break;
        }
        keys.insert(key, value);
    }
    let data_file =
        data_file.ok_or_else(|| Error::format(&display, "missing ElementDataFile"))?;

    let get = |k: &str| -> Result<&String> {
        keys.get(k)
            .ok_or_else(|| Error::format(&display, format!("missing header key {k}")))
    };
    let ndims: usize = get("NDims")?
        .parse()
        .map_err(|_| Error::format(&display, "bad NDims"))?;
    if ndims != 3 {
        return Err(Error::format(&display, format!("NDims {ndims}, expected 3")));
    }
    let parse3 = |k: &str| -> Result<[f64; 3]> {
        let parts: Vec<f64> = get(k)?
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(&display, format!("bad {k}")))?;
        if parts.len() != 3 {
            return Err(Error::format(&display, format!("{k} needs 3 values")));
        }
        Ok([parts[0], parts[1], parts[2]])
    };
    let dims_f = parse3("DimSize")?;
    let dims = [dims_f[0] as usize, dims_f[1] as usize, dims_f[2] as usize];
    let spacing = parse3("ElementSpacing")?;
    let origin = keys
        .contains_key("Offset")
        .then(|| parse3("Offset"))
        .transpose()?
        .unwrap_or([0.0; 3]);

    let element_type = get("ElementType")?;
    if element_type != expect_type {
        return Err(Error::format(
            &display,
            format!("ElementType {element_type}, expected {expect_type}"),
        ));
    }
    let channels: usize = keys
        .get("ElementNumberOfChannels")
        .map(|v| v.parse())
        .transpose()
        .map_err(|_| Error::format(&display, "bad ElementNumberOfChannels"))?
        .unwrap_or(1);
    if channels != expect_channels {
        return Err(Error::format(
            &display,
            format!("{channels} channels, expected {expect_channels}"),
        ));
    }
    if let Some(order) = keys.get("ElementByteOrderMSB") {
        if order.eq_ignore_ascii_case("true") {
            return Err(Error::format(&display, "big-endian payloads unsupported"));
        }
    }

    let geom = Geometry::new(dims, spacing, origin)?;
    let element_size = match expect_type {
        ELEMENT_USHORT => 2,
        _ => 4,
    };
    let expected_len = geom.voxel_count() * channels * element_size;

    let payload = if data_file == "LOCAL" {
        bytes[cursor..].to_vec()
    } else {
        let raw_path = path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&data_file);
        std::fs::read(&raw_path).map_err(|e| Error::io(raw_path.display().to_string(), e))?
    };
    if payload.len() != expected_len {
        return Err(Error::format(
            &display,
            format!("payload is {} bytes, expected {expected_len}", payload.len()),
        ));
    }
    Ok((geom, payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn volume() -> VolumeGrid {
        Grid3::from_fn(
            Geometry::new([5, 4, 3], [0.4, 0.5, 0.6], [1.5, -2.0, 0.25]).unwrap(),
            |p| p[0] as f32 * 0.3 + p[1] as f32 - p[2] as f32 * 0.7,
        )
    }

    #[test]
    fn volume_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.mha");
        let v = volume();
        write_volume(&path, &v).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.geometry(), v.geometry());
        assert_eq!(back.data(), v.data());
    }

    #[test]
    fn labels_and_fields_round_trip() {
        let dir = tempdir().unwrap();
        let l: LabelGrid = Grid3::from_fn(Geometry::unit([4, 4, 4]), |p| {
            ((p[0] + p[1] * 2 + p[2] * 3) % 28) as u16
        });
        let lp = dir.path().join("l.mha");
        write_labels(&lp, &l).unwrap();
        assert_eq!(read_labels(&lp).unwrap().data(), l.data());

        let f: DisplacementField = Field3::from_fn(
            Geometry::new([3, 3, 3], [0.4; 3], [0.0; 3]).unwrap(),
            |p| [p[0] as f32, -(p[1] as f32), 0.5 * p[2] as f32],
        );
        let fp = dir.path().join("f.mha");
        write_field(&fp, &f).unwrap();
        let back = read_field(&fp).unwrap();
        assert_eq!(back.geometry(), f.geometry());
        assert_eq!(back.data(), f.data());
    }

    #[test]
    fn unknown_keys_are_ignored_and_types_enforced() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.mha");
        let v = volume();
        write_volume(&path, &v).unwrap();
        // inject an unknown key before ElementType
        let bytes = std::fs::read(&path).unwrap();
        let text_end = bytes.windows(5).position(|w| w == b"LOCAL").unwrap() + 6;
        let mut header = String::from_utf8(bytes[..text_end].to_vec()).unwrap();
        header = header.replace("ElementType", "CompressedData = False\nAnatomicalOrientation = RAI\nElementType");
        let mut rewritten = header.into_bytes();
        rewritten.extend_from_slice(&bytes[text_end..]);
        std::fs::write(&path, rewritten).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.data(), v.data());
        // reading as the wrong element type fails
        assert!(read_labels(&path).is_err());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.mha");
        write_volume(&path, &volume()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn external_raw_reference_is_readable() {
        let dir = tempdir().unwrap();
        let v = volume();
        // write LOCAL, then split into header + raw manually
        let local = dir.path().join("v.mha");
        write_volume(&local, &v).unwrap();
        let bytes = std::fs::read(&local).unwrap();
        let header_end = bytes.windows(6).position(|w| w == b"LOCAL\n").unwrap() + 6;
        let header = String::from_utf8(bytes[..header_end].to_vec())
            .unwrap()
            .replace("ElementDataFile = LOCAL", "ElementDataFile = v.raw");
        std::fs::write(dir.path().join("v.mhd"), header).unwrap();
        std::fs::write(dir.path().join("v.raw"), &bytes[header_end..]).unwrap();
        let back = read_volume(&dir.path().join("v.mhd")).unwrap();
        assert_eq!(back.data(), v.data());
    }
}
