//! Reader/writer for a strict subset of NIfTI-1: single-file uncompressed
//! `.nii`, little-endian, 3-dimensional, datatypes uint8 / int16 / float32,
//! axis-aligned qform. Label legends are persisted in a `<name>.labels.json`
//! sidecar since the format has no legend field.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::volume::{LabelMap, Legend, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    datatype: i16,
    scl_slope: f32,
    scl_inter: f32,
    vox_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::TruncatedPayload { expected: HEADER_SIZE, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
    if &magic != MAGIC_SINGLE && &magic != MAGIC_PAIR {
        return Err(Error::BadMagic);
    }
    let rd_i16 = |off: usize| i16::from_le_bytes([bytes[off], bytes[off + 1]]);
    let rd_f32 = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());

    let sizeof_hdr = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if sizeof_hdr != HEADER_SIZE as i32 {
        if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            return Err(Error::BigEndian);
        }
        return Err(Error::BadMagic);
    }
    let ndim = rd_i16(40);
    if !(1..=7).contains(&ndim) && (1..=7).contains(&ndim.swap_bytes()) {
        return Err(Error::BigEndian);
    }
    if ndim != 3 {
        return Err(Error::BadDimensionality(ndim));
    }
    let dims = [rd_i16(42), rd_i16(44), rd_i16(46)];
    if dims.iter().any(|&d| d < 1) {
        return Err(Error::InvalidGrid(format!("non-positive NIfTI dim {dims:?}")));
    }
    let datatype = rd_i16(70);
    if ![DT_UINT8, DT_INT16, DT_FLOAT32].contains(&datatype) {
        return Err(Error::UnsupportedDatatype(datatype));
    }
    let spacing = [rd_f32(80) as f64, rd_f32(84) as f64, rd_f32(88) as f64];
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidGrid(format!("non-positive pixdim {spacing:?}")));
    }
    let origin = [rd_f32(268) as f64, rd_f32(272) as f64, rd_f32(276) as f64];
    let vox_offset = rd_f32(108) as usize;
    Ok(Header {
        dims: [dims[0] as usize, dims[1] as usize, dims[2] as usize],
        spacing,
        origin,
        datatype,
        scl_slope: rd_f32(112),
        scl_inter: rd_f32(116),
        vox_offset: vox_offset.max(VOX_OFFSET),
    })
}

fn bytes_per_voxel(datatype: i16) -> usize {
    match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        _ => 4,
    }
}

fn decode_payload(h: &Header, bytes: &[u8]) -> Result<Vec<f64>> {
    let nvox = h.dims[0] * h.dims[1] * h.dims[2];
    let expected = nvox * bytes_per_voxel(h.datatype);
    if bytes.len() < h.vox_offset + expected {
        return Err(Error::TruncatedPayload {
            expected: h.vox_offset + expected,
            found: bytes.len(),
        });
    }
    let mut rdr = Cursor::new(&bytes[h.vox_offset..h.vox_offset + expected]);
    let mut raw = Vec::with_capacity(nvox);
    match h.datatype {
        DT_UINT8 => {
            for _ in 0..nvox {
                raw.push(rdr.read_u8()? as f64);
            }
        }
        DT_INT16 => {
            for _ in 0..nvox {
                raw.push(rdr.read_i16::<LittleEndian>()? as f64);
            }
        }
        _ => {
            for _ in 0..nvox {
                raw.push(rdr.read_f32::<LittleEndian>()? as f64);
            }
        }
    }
    if h.scl_slope != 0.0 && (h.scl_slope != 1.0 || h.scl_inter != 0.0) {
        for v in &mut raw {
            *v = *v * h.scl_slope as f64 + h.scl_inter as f64;
        }
    }
    Ok(raw)
}

/// Read an intensity volume. Integer datatypes are converted to float with
/// scl_slope/scl_inter applied when nonzero.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path)?;
    let h = parse_header(&bytes)?;
    let raw = decode_payload(&h, &bytes)?;
    let grid = Grid::new(h.dims, h.spacing, h.origin)?;
    Volume::new(grid, raw.into_iter().map(|v| v as f32).collect())
}

/// Read a label map. Requires an unscaled integer datatype with non-negative
/// values. The legend is taken from the `.labels.json` sidecar when present;
/// otherwise placeholder names are synthesized.
pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let bytes = std::fs::read(path)?;
    let h = parse_header(&bytes)?;
    if h.datatype == DT_FLOAT32 {
        return Err(Error::UnsupportedDatatype(DT_FLOAT32));
    }
    if h.scl_slope != 0.0 && (h.scl_slope != 1.0 || h.scl_inter != 0.0) {
        return Err(Error::InvalidParams("label maps must not carry intensity scaling".into()));
    }
    let raw = decode_payload(&h, &bytes)?;
    let mut data = Vec::with_capacity(raw.len());
    for v in raw {
        if v < 0.0 {
            return Err(Error::InvalidParams(format!("negative label value {v}")));
        }
        data.push(v as u32);
    }
    let grid = Grid::new(h.dims, h.spacing, h.origin)?;
    let legend = match read_legend_sidecar(path)? {
        Some(legend) => legend,
        None => {
            let mut legend = Legend::new();
            legend.insert(0, "background".into());
            for &v in &data {
                legend.entry(v).or_insert_with(|| format!("label-{v}"));
            }
            legend
        }
    };
    LabelMap::new(grid, data, legend)
}

fn write_header(
    buf: &mut Vec<u8>,
    grid: &Grid,
    datatype: i16,
) -> Result<()> {
    let mut h = vec![0u8; HEADER_SIZE];
    let wr_i32 = |h: &mut [u8], off: usize, v: i32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    let wr_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let wr_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    wr_i32(&mut h, 0, HEADER_SIZE as i32);
    wr_i16(&mut h, 40, 3); // dim[0]
    for a in 0..3 {
        if grid.dims[a] > i16::MAX as usize {
            return Err(Error::InvalidGrid(format!("dim {} exceeds NIfTI-1 i16 range", grid.dims[a])));
        }
        wr_i16(&mut h, 42 + 2 * a, grid.dims[a] as i16);
    }
    for a in 3..7 {
        wr_i16(&mut h, 42 + 2 * a, 1);
    }
    wr_i16(&mut h, 70, datatype);
    wr_i16(&mut h, 72, (bytes_per_voxel(datatype) * 8) as i16);
    wr_f32(&mut h, 76, 1.0); // pixdim[0] = qfac
    for a in 0..3 {
        wr_f32(&mut h, 80 + 4 * a, grid.spacing[a] as f32);
    }
    wr_f32(&mut h, 108, VOX_OFFSET as f32);
    // scl_slope = 0: stored values are used verbatim
    wr_f32(&mut h, 112, 0.0);
    wr_f32(&mut h, 116, 0.0);
    wr_i16(&mut h, 252, 1); // qform_code = NIFTI_XFORM_SCANNER_ANAT
    wr_i16(&mut h, 254, 0); // no sform
    // identity quaternion: b = c = d = 0
    for a in 0..3 {
        wr_f32(&mut h, 268 + 4 * a, grid.origin[a] as f32);
    }
    h[344..348].copy_from_slice(MAGIC_SINGLE);
    buf.extend_from_slice(&h);
    buf.extend_from_slice(&[0u8; VOX_OFFSET - HEADER_SIZE]);
    Ok(())
}

/// Write a volume as float32. `read_volume` inverts this exactly.
pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(VOX_OFFSET + v.data().len() * 4);
    write_header(&mut buf, v.grid(), DT_FLOAT32)?;
    for &x in v.data() {
        buf.write_f32::<LittleEndian>(x)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Write a label map with the smallest fitting integer datatype (uint8 or
/// int16) plus a `.labels.json` legend sidecar.
pub fn write_labels(lm: &LabelMap, path: &Path) -> Result<()> {
    let max = lm.data().iter().copied().max().unwrap_or(0);
    let datatype = if max <= u8::MAX as u32 {
        DT_UINT8
    } else if max <= i16::MAX as u32 {
        DT_INT16
    } else {
        return Err(Error::LabelOverflow(max));
    };
    let mut buf = Vec::with_capacity(VOX_OFFSET + lm.data().len() * bytes_per_voxel(datatype));
    write_header(&mut buf, lm.grid(), datatype)?;
    match datatype {
        DT_UINT8 => {
            for &x in lm.data() {
                buf.write_u8(x as u8)?;
            }
        }
        _ => {
            for &x in lm.data() {
                buf.write_i16::<LittleEndian>(x as i16)?;
            }
        }
    }
    std::fs::write(path, buf)?;
    write_legend_sidecar(path, lm.legend())?;
    Ok(())
}

/// `foo.nii` -> `foo.labels.json`.
pub fn legend_sidecar_path(labels_path: &Path) -> PathBuf {
    labels_path.with_extension("labels.json")
}

fn write_legend_sidecar(labels_path: &Path, legend: &Legend) -> Result<()> {
    let named: BTreeMap<String, String> =
        legend.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    let file = std::fs::File::create(legend_sidecar_path(labels_path))?;
    serde_json::to_writer_pretty(file, &named)?;
    Ok(())
}

fn read_legend_sidecar(labels_path: &Path) -> Result<Option<Legend>> {
    let sidecar = legend_sidecar_path(labels_path);
    if !sidecar.exists() {
        return Ok(None);
    }
    let named: BTreeMap<String, String> = serde_json::from_reader(std::fs::File::open(sidecar)?)?;
    let mut legend = Legend::new();
    for (k, v) in named {
        let id: u32 = k
            .parse()
            .map_err(|_| Error::InvalidParams(format!("non-integer legend key {k:?}")))?;
        legend.insert(id, v);
    }
    Ok(Some(legend))
}

/// One atlas: an intensity volume and its label map (legend via sidecar or
/// inline override).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AtlasEntry {
    pub intensity: PathBuf,
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub legend: Option<BTreeMap<String, String>>,
}

/// The segmentation target: intensity plus optional ground truth and named
/// substructure region masks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TargetEntry {
    pub intensity: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub substructures: BTreeMap<String, PathBuf>,
}

/// A multi-atlas data set: n atlases plus one target.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AtlasManifest {
    pub atlases: Vec<AtlasEntry>,
    pub target: TargetEntry,
    /// Consistent legend across all atlases, filled by `load_manifest`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub legend: Legend,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn probe(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

fn entry_legend(entry: &AtlasEntry) -> Result<Legend> {
    if let Some(inline) = &entry.legend {
        let mut legend = Legend::new();
        legend.insert(0, "background".into());
        for (k, v) in inline {
            let id: u32 = k
                .parse()
                .map_err(|_| Error::InvalidParams(format!("non-integer legend key {k:?}")))?;
            legend.insert(id, v.clone());
        }
        return Ok(legend);
    }
    match read_legend_sidecar(&entry.labels)? {
        Some(l) => Ok(l),
        None => Ok(Legend::new()),
    }
}

/// Load and validate a manifest: every referenced file must exist, and atlas
/// legends must agree (same id, same name). Relative paths resolve against
/// the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<AtlasManifest> {
    let mut manifest: AtlasManifest = serde_json::from_reader(std::fs::File::open(path)?)?;
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();

    for entry in &mut manifest.atlases {
        entry.intensity = resolve(&base, &entry.intensity);
        entry.labels = resolve(&base, &entry.labels);
        probe(&entry.intensity)?;
        probe(&entry.labels)?;
    }
    manifest.target.intensity = resolve(&base, &manifest.target.intensity);
    probe(&manifest.target.intensity)?;
    if let Some(gt) = &manifest.target.ground_truth {
        let gt = resolve(&base, gt);
        probe(&gt)?;
        manifest.target.ground_truth = Some(gt);
    }
    for (_, p) in manifest.target.substructures.iter_mut() {
        *p = resolve(&base, p);
        probe(p)?;
    }

    let mut merged = Legend::new();
    merged.insert(0, "background".into());
    for entry in &manifest.atlases {
        for (id, name) in entry_legend(entry)? {
            match merged.get(&id) {
                Some(existing) if existing != &name => {
                    return Err(Error::LegendConflict { id, first: existing.clone(), second: name });
                }
                _ => {
                    merged.insert(id, name);
                }
            }
        }
    }
    manifest.legend = merged;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::legend;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn volume_roundtrip_is_exact() {
        let dir = tmp();
        let g = Grid::new([4, 4, 4], [0.5, 1.0, 2.5], [1.0, -2.0, 3.0]).unwrap();
        let v = Volume::from_fn(g, |i, j, k| (i + 4 * j + 16 * k) as f32 * 0.37 - 5.0).unwrap();
        let p = dir.path().join("ramp.nii");
        write_volume(&v, &p).unwrap();
        let r = read_volume(&p).unwrap();
        assert_eq!(r.grid().dims, g.dims);
        assert_eq!(r.grid().spacing, [0.5, 1.0, 2.5]);
        assert_eq!(r.grid().origin, [1.0, -2.0, 3.0]);
        assert_eq!(r.data(), v.data());
    }

    #[test]
    fn labels_roundtrip_with_legend() {
        let dir = tmp();
        let g = Grid::isotropic([3, 3, 3]);
        let mut data = vec![0u32; g.len()];
        data[0] = 1;
        data[13] = 2;
        let lm = LabelMap::new(g, data, legend(&[(1, "vertebra"), (2, "rib")])).unwrap();
        let p = dir.path().join("labels.nii");
        write_labels(&lm, &p).unwrap();
        assert!(dir.path().join("labels.labels.json").exists());
        let r = read_labels(&p).unwrap();
        assert_eq!(r.data(), lm.data());
        assert_eq!(r.legend(), lm.legend());
    }

    #[test]
    fn int16_datatype_used_for_large_labels() {
        let dir = tmp();
        let g = Grid::isotropic([2, 2, 2]);
        let mut data = vec![0u32; 8];
        data[3] = 300;
        let lm = LabelMap::new(g, data, legend(&[(300, "big")])).unwrap();
        let p = dir.path().join("big.nii");
        write_labels(&lm, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let datatype = i16::from_le_bytes([bytes[70], bytes[71]]);
        assert_eq!(datatype, DT_INT16);
        assert_eq!(read_labels(&p).unwrap().data(), lm.data());
    }

    #[test]
    fn scl_slope_applied_on_read() {
        // int16 file with scl_slope = 2, scl_inter = 1, raw value 3 -> 7
        let dir = tmp();
        let g = Grid::isotropic([1, 1, 1]);
        let mut buf = Vec::new();
        write_header(&mut buf, &g, DT_INT16).unwrap();
        buf[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        buf[116..120].copy_from_slice(&1.0f32.to_le_bytes());
        buf.extend_from_slice(&3i16.to_le_bytes());
        let p = dir.path().join("scaled.nii");
        std::fs::write(&p, buf).unwrap();
        let v = read_volume(&p).unwrap();
        assert_eq!(v.data()[0], 7.0);
    }

    #[test]
    fn dim0_must_be_three() {
        let dir = tmp();
        let g = Grid::isotropic([2, 2, 2]);
        let mut buf = Vec::new();
        write_header(&mut buf, &g, DT_FLOAT32).unwrap();
        buf[40..42].copy_from_slice(&4i16.to_le_bytes());
        buf.extend_from_slice(&vec![0u8; 32]);
        let p = dir.path().join("4d.nii");
        std::fs::write(&p, buf).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::BadDimensionality(4))));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tmp();
        let g = Grid::isotropic([2, 2, 2]);
        let mut buf = Vec::new();
        write_header(&mut buf, &g, DT_FLOAT32).unwrap();
        buf[344..348].copy_from_slice(b"xxx\0");
        buf.extend_from_slice(&vec![0u8; 32]);
        let p = dir.path().join("bad.nii");
        std::fs::write(&p, buf).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::BadMagic)));
    }

    #[test]
    fn big_endian_rejected_not_misread() {
        let dir = tmp();
        let g = Grid::isotropic([2, 2, 2]);
        let mut buf = Vec::new();
        write_header(&mut buf, &g, DT_FLOAT32).unwrap();
        // byte-swap sizeof_hdr to simulate a big-endian writer
        buf[0..4].copy_from_slice(&(348i32.swap_bytes()).to_le_bytes());
        buf.extend_from_slice(&vec![0u8; 32]);
        let p = dir.path().join("be.nii");
        std::fs::write(&p, buf).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::BigEndian)));
    }

    #[test]
    fn truncated_payload_detected() {
        let dir = tmp();
        let g = Grid::isotropic([4, 4, 4]);
        let v = Volume::from_fn(g, |i, _, _| i as f32).unwrap();
        let p = dir.path().join("trunc.nii");
        write_volume(&v, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn unsupported_datatype_rejected() {
        let dir = tmp();
        let g = Grid::isotropic([1, 1, 1]);
        let mut buf = Vec::new();
        write_header(&mut buf, &g, DT_FLOAT32).unwrap();
        buf[70..72].copy_from_slice(&64i16.to_le_bytes()); // float64
        buf.extend_from_slice(&vec![0u8; 8]);
        let p = dir.path().join("f64.nii");
        std::fs::write(&p, buf).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::UnsupportedDatatype(64))));
    }

    #[test]
    fn byte_layout_of_2x2x2_float_volume() {
        let dir = tmp();
        let g = Grid::new([2, 2, 2], [1.0, 2.0, 3.0], [4.0, 5.0, 6.0]).unwrap();
        let v = Volume::new(g, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        let p = dir.path().join("layout.nii");
        write_volume(&v, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 352 + 8 * 4);
        assert_eq!(i32::from_le_bytes(bytes[0..4].try_into().unwrap()), 348);
        assert_eq!(i16::from_le_bytes(bytes[40..42].try_into().unwrap()), 3);
        assert_eq!(i16::from_le_bytes(bytes[42..44].try_into().unwrap()), 2);
        assert_eq!(i16::from_le_bytes(bytes[70..72].try_into().unwrap()), DT_FLOAT32);
        assert_eq!(i16::from_le_bytes(bytes[72..74].try_into().unwrap()), 32);
        assert_eq!(f32::from_le_bytes(bytes[84..88].try_into().unwrap()), 2.0); // pixdim[2]
        assert_eq!(f32::from_le_bytes(bytes[108..112].try_into().unwrap()), 352.0);
        assert_eq!(f32::from_le_bytes(bytes[268..272].try_into().unwrap()), 4.0); // qoffset_x
        assert_eq!(&bytes[344..348], b"n+1\0");
        // x-fastest payload order
        for (n, chunk) in bytes[352..].chunks(4).enumerate() {
            assert_eq!(f32::from_le_bytes(chunk.try_into().unwrap()), n as f32);
        }
    }

    #[test]
    fn manifest_loads_and_validates() {
        let dir = tmp();
        let g = Grid::isotropic([2, 2, 2]);
        let vol = Volume::from_fn(g, |i, _, _| i as f32).unwrap();
        let lab = LabelMap::new(g, vec![0, 1, 0, 0, 0, 0, 0, 1], legend(&[(1, "vertebra")])).unwrap();
        for n in 0..2 {
            write_volume(&vol, &dir.path().join(format!("a{n}.nii"))).unwrap();
            write_labels(&lab, &dir.path().join(format!("a{n}_labels.nii"))).unwrap();
        }
        write_volume(&vol, &dir.path().join("target.nii")).unwrap();
        let manifest_json = serde_json::json!({
            "atlases": [
                {"intensity": "a0.nii", "labels": "a0_labels.nii"},
                {"intensity": "a1.nii", "labels": "a1_labels.nii"},
            ],
            "target": {"intensity": "target.nii"},
        });
        let mp = dir.path().join("manifest.json");
        std::fs::write(&mp, serde_json::to_vec(&manifest_json).unwrap()).unwrap();
        let m = load_manifest(&mp).unwrap();
        assert_eq!(m.atlases.len(), 2);
        assert_eq!(m.legend.get(&1).map(String::as_str), Some("vertebra"));
    }

    #[test]
    fn manifest_missing_file_names_path() {
        let dir = tmp();
        let manifest_json = serde_json::json!({
            "atlases": [{"intensity": "a0.nii", "labels": "a0_labels.nii"}],
            "target": {"intensity": "target.nii"},
        });
        let mp = dir.path().join("manifest.json");
        std::fs::write(&mp, serde_json::to_vec(&manifest_json).unwrap()).unwrap();
        match load_manifest(&mp) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("a0.nii")),
            other => panic!("expected MissingFile, got {other:?}"),
        }
    }

    #[test]
    fn manifest_legend_conflict_detected() {
        let dir = tmp();
        let g = Grid::isotropic([2, 2, 2]);
        let vol = Volume::from_fn(g, |i, _, _| i as f32).unwrap();
        let lab1 = LabelMap::new(g, vec![0, 2, 0, 0, 0, 0, 0, 0], legend(&[(2, "rib")])).unwrap();
        let lab2 = LabelMap::new(g, vec![0, 2, 0, 0, 0, 0, 0, 0], legend(&[(2, "vertebra")])).unwrap();
        write_volume(&vol, &dir.path().join("a0.nii")).unwrap();
        write_labels(&lab1, &dir.path().join("a0_labels.nii")).unwrap();
        write_volume(&vol, &dir.path().join("a1.nii")).unwrap();
        write_labels(&lab2, &dir.path().join("a1_labels.nii")).unwrap();
        write_volume(&vol, &dir.path().join("target.nii")).unwrap();
        let manifest_json = serde_json::json!({
            "atlases": [
                {"intensity": "a0.nii", "labels": "a0_labels.nii"},
                {"intensity": "a1.nii", "labels": "a1_labels.nii"},
            ],
            "target": {"intensity": "target.nii"},
        });
        let mp = dir.path().join("manifest.json");
        std::fs::write(&mp, serde_json::to_vec(&manifest_json).unwrap()).unwrap();
        assert!(matches!(load_manifest(&mp), Err(Error::LegendConflict { id: 2, .. })));
    }
}
