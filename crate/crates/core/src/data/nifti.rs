//! Single-file NIfTI-1 (`.nii`) reading and writing.
//!
//! Either byte order is accepted; the order is detected from `sizeof_hdr`
//! and kept so that writing a parsed volume reproduces the input bytes.
//! Voxels are indexed `x + nx·(y + ny·z)`.

use std::path::Path;

use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
pub const MAGIC: &[u8; 4] = b"n+1\0";
pub const MIN_FILE_SIZE: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// Every NIfTI-1 header field, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub data_type: [u8; 10],
    pub db_name: [u8; 18],
    pub extents: i32,
    pub session_error: i16,
    pub regular: u8,
    pub dim_info: u8,
    pub dim: [i16; 8],
    pub intent_p1: f32,
    pub intent_p2: f32,
    pub intent_p3: f32,
    pub intent_code: i16,
    pub datatype: i16,
    pub bitpix: i16,
    pub slice_start: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub slice_end: i16,
    pub slice_code: u8,
    pub xyzt_units: u8,
    pub cal_max: f32,
    pub cal_min: f32,
    pub slice_duration: f32,
    pub toffset: f32,
    pub glmax: i32,
    pub glmin: i32,
    pub descrip: [u8; 80],
    pub aux_file: [u8; 24],
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern_b: f32,
    pub quatern_c: f32,
    pub quatern_d: f32,
    pub qoffset_x: f32,
    pub qoffset_y: f32,
    pub qoffset_z: f32,
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
    pub intent_name: [u8; 16],
    pub magic: [u8; 4],
}

impl NiftiHeader {
    /// Minimal valid header for a 3-D volume of the given datatype.
    pub fn for_volume(dims: [usize; 3], datatype: i16) -> Result<Self> {
        let bitpix = bits_per_voxel(datatype)?;
        let mut dim = [1i16; 8];
        dim[0] = 3;
        for (d, &n) in dim[1..4].iter_mut().zip(&dims) {
            *d = i16::try_from(n)
                .map_err(|_| Error::InvalidData(format!("extent {n} does not fit a NIfTI-1 header")))?;
        }
        Ok(NiftiHeader {
            sizeof_hdr: HEADER_SIZE as i32,
            data_type: [0; 10],
            db_name: [0; 18],
            extents: 0,
            session_error: 0,
            regular: b'r',
            dim_info: 0,
            dim,
            intent_p1: 0.0,
            intent_p2: 0.0,
            intent_p3: 0.0,
            intent_code: 0,
            datatype,
            bitpix,
            slice_start: 0,
            pixdim: [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            vox_offset: MIN_FILE_SIZE as f32,
            scl_slope: 0.0,
            scl_inter: 0.0,
            slice_end: 0,
            slice_code: 0,
            xyzt_units: 2,
            cal_max: 0.0,
            cal_min: 0.0,
            slice_duration: 0.0,
            toffset: 0.0,
            glmax: 0,
            glmin: 0,
            descrip: [0; 80],
            aux_file: [0; 24],
            qform_code: 0,
            sform_code: 0,
            quatern_b: 0.0,
            quatern_c: 0.0,
            quatern_d: 0.0,
            qoffset_x: 0.0,
            qoffset_y: 0.0,
            qoffset_z: 0.0,
            srow_x: [1.0, 0.0, 0.0, 0.0],
            srow_y: [0.0, 1.0, 0.0, 0.0],
            srow_z: [0.0, 0.0, 1.0, 0.0],
            intent_name: [0; 16],
            magic: *MAGIC,
        })
    }

    /// Spatial extents `[nx, ny, nz]`; dimensions beyond `dim[0]` count as 1.
    pub fn dims(&self) -> [usize; 3] {
        let rank = self.dim[0].clamp(0, 7) as usize;
        [1, 2, 3].map(|i| if i <= rank { self.dim[i].max(1) as usize } else { 1 })
    }
}

fn bits_per_voxel(datatype: i16) -> Result<i16> {
    match datatype {
        DT_UINT8 => Ok(8),
        DT_INT16 => Ok(16),
        DT_FLOAT32 => Ok(32),
        other => Err(Error::UnsupportedDatatype(other)),
    }
}

/// Stored voxel values before scaling.
#[derive(Debug, Clone, PartialEq)]
pub enum RawVoxels {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
}

impl RawVoxels {
    pub fn len(&self) -> usize {
        match self {
            RawVoxels::U8(v) => v.len(),
            RawVoxels::I16(v) => v.len(),
            RawVoxels::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, i: usize) -> f32 {
        match self {
            RawVoxels::U8(v) => v[i] as f32,
            RawVoxels::I16(v) => v[i] as f32,
            RawVoxels::F32(v) => v[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiVolume {
    pub header: NiftiHeader,
    pub endian: Endian,
    /// Bytes between the header and `vox_offset` (extension flag and any
    /// extensions), kept verbatim.
    pub extension: Vec<u8>,
    pub raw: RawVoxels,
    /// Scaled voxel values.
    pub voxels: Vec<f32>,
}

impl NiftiVolume {
    pub fn dims(&self) -> [usize; 3] {
        self.header.dims()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let [nx, ny, _] = self.dims();
        x + nx * (y + ny * z)
    }

    pub fn max_intensity(&self) -> f32 {
        self.voxels.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Float32 little-endian volume with a default header.
    pub fn from_f32(dims: [usize; 3], values: Vec<f32>) -> Result<Self> {
        Self::from_raw(NiftiHeader::for_volume(dims, DT_FLOAT32)?, Endian::Little, RawVoxels::F32(values))
    }

    pub fn from_raw(header: NiftiHeader, endian: Endian, raw: RawVoxels) -> Result<Self> {
        let [nx, ny, nz] = header.dims();
        if raw.len() != nx * ny * nz {
            return Err(Error::shape(format!(
                "{nx}x{ny}x{nz} volume needs {} voxels, got {}",
                nx * ny * nz,
                raw.len()
            )));
        }
        let pad = (header.vox_offset as usize).saturating_sub(HEADER_SIZE);
        let voxels = scale(&header, &raw);
        Ok(NiftiVolume { header, endian, extension: vec![0; pad], raw, voxels })
    }
}

fn scale(h: &NiftiHeader, raw: &RawVoxels) -> Vec<f32> {
    let n = raw.len();
    if h.scl_slope != 0.0 && h.scl_slope.is_finite() {
        (0..n).map(|i| raw.get(i) * h.scl_slope + h.scl_inter).collect()
    } else {
        (0..n).map(|i| raw.get(i)).collect()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    endian: Endian,
}

impl Cursor<'_> {
    fn raw<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.bytes[self.pos..self.pos + N].try_into().expect("header bounds checked");
        self.pos += N;
        out
    }

    fn ordered<const N: usize>(&mut self) -> [u8; N] {
        let mut b = self.raw::<N>();
        if self.endian == Endian::Big {
            b.reverse();
        }
        b
    }

    fn u8(&mut self) -> u8 {
        self.raw::<1>()[0]
    }
    fn i16(&mut self) -> i16 {
        i16::from_le_bytes(self.ordered())
    }
    fn i32(&mut self) -> i32 {
        i32::from_le_bytes(self.ordered())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.ordered())
    }
    fn i16s<const N: usize>(&mut self) -> [i16; N] {
        std::array::from_fn(|_| self.i16())
    }
    fn f32s<const N: usize>(&mut self) -> [f32; N] {
        std::array::from_fn(|_| self.f32())
    }
}

struct Sink {
    out: Vec<u8>,
    endian: Endian,
}

impl Sink {
    fn put<const N: usize>(&mut self, mut le: [u8; N]) {
        if self.endian == Endian::Big {
            le.reverse();
        }
        self.out.extend_from_slice(&le);
    }
    fn bytes(&mut self, b: &[u8]) {
        self.out.extend_from_slice(b);
    }
    fn i16(&mut self, v: i16) {
        self.put(v.to_le_bytes())
    }
    fn i32(&mut self, v: i32) {
        self.put(v.to_le_bytes())
    }
    fn f32(&mut self, v: f32) {
        self.put(v.to_le_bytes())
    }
}

fn read_header(c: &mut Cursor<'_>) -> NiftiHeader {
    NiftiHeader {
        sizeof_hdr: c.i32(),
        data_type: c.raw(),
        db_name: c.raw(),
        extents: c.i32(),
        session_error: c.i16(),
        regular: c.u8(),
        dim_info: c.u8(),
        dim: c.i16s(),
        intent_p1: c.f32(),
        intent_p2: c.f32(),
        intent_p3: c.f32(),
        intent_code: c.i16(),
        datatype: c.i16(),
        bitpix: c.i16(),
        slice_start: c.i16(),
        pixdim: c.f32s(),
        vox_offset: c.f32(),
        scl_slope: c.f32(),
        scl_inter: c.f32(),
        slice_end: c.i16(),
        slice_code: c.u8(),
        xyzt_units: c.u8(),
        cal_max: c.f32(),
        cal_min: c.f32(),
        slice_duration: c.f32(),
        toffset: c.f32(),
        glmax: c.i32(),
        glmin: c.i32(),
        descrip: c.raw(),
        aux_file: c.raw(),
        qform_code: c.i16(),
        sform_code: c.i16(),
        quatern_b: c.f32(),
        quatern_c: c.f32(),
        quatern_d: c.f32(),
        qoffset_x: c.f32(),
        qoffset_y: c.f32(),
        qoffset_z: c.f32(),
        srow_x: c.f32s(),
        srow_y: c.f32s(),
        srow_z: c.f32s(),
        intent_name: c.raw(),
        magic: c.raw(),
    }
}

fn write_header(s: &mut Sink, h: &NiftiHeader) {
    s.i32(h.sizeof_hdr);
    s.bytes(&h.data_type);
    s.bytes(&h.db_name);
    s.i32(h.extents);
    s.i16(h.session_error);
    s.bytes(&[h.regular, h.dim_info]);
    h.dim.iter().for_each(|&d| s.i16(d));
    for v in [h.intent_p1, h.intent_p2, h.intent_p3] {
        s.f32(v);
    }
    for v in [h.intent_code, h.datatype, h.bitpix, h.slice_start] {
        s.i16(v);
    }
    h.pixdim.iter().for_each(|&v| s.f32(v));
    for v in [h.vox_offset, h.scl_slope, h.scl_inter] {
        s.f32(v);
    }
    s.i16(h.slice_end);
    s.bytes(&[h.slice_code, h.xyzt_units]);
    for v in [h.cal_max, h.cal_min, h.slice_duration, h.toffset] {
        s.f32(v);
    }
    s.i32(h.glmax);
    s.i32(h.glmin);
    s.bytes(&h.descrip);
    s.bytes(&h.aux_file);
    s.i16(h.qform_code);
    s.i16(h.sform_code);
    for v in [h.quatern_b, h.quatern_c, h.quatern_d, h.qoffset_x, h.qoffset_y, h.qoffset_z] {
        s.f32(v);
    }
    for row in [&h.srow_x, &h.srow_y, &h.srow_z] {
        row.iter().for_each(|&v| s.f32(v));
    }
    s.bytes(&h.intent_name);
    s.bytes(&h.magic);
}

pub fn parse_nifti(bytes: &[u8]) -> Result<NiftiVolume> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedFile(format!("{} bytes is too short for a NIfTI-1 header", bytes.len())));
    }
    let first = i32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"));
    let endian = if first == HEADER_SIZE as i32 {
        Endian::Little
    } else if first.swap_bytes() == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(Error::BadMagic(format!("sizeof_hdr is {first}, expected 348")));
    };
    if bytes.len() < MIN_FILE_SIZE {
        return Err(Error::TruncatedFile(format!(
            "{} bytes is shorter than the {MIN_FILE_SIZE}-byte minimum",
            bytes.len()
        )));
    }
    let header = read_header(&mut Cursor { bytes, pos: 0, endian });
    if &header.magic != MAGIC {
        return Err(Error::BadMagic(format!(
            "magic {:?} is not single-file NIfTI-1",
            String::from_utf8_lossy(&header.magic)
        )));
    }
    if !(1..=7).contains(&header.dim[0]) {
        return Err(Error::InvalidData(format!("dim[0] = {} outside 1..=7", header.dim[0])));
    }
    if header.dim[1..=header.dim[0] as usize].iter().any(|&d| d < 1) {
        return Err(Error::InvalidData(format!("non-positive extent in dim {:?}", header.dim)));
    }
    bits_per_voxel(header.datatype)?;
    let offset = header.vox_offset;
    if !(offset.is_finite() && offset >= HEADER_SIZE as f32) {
        return Err(Error::InvalidData(format!("vox_offset {offset} is before the end of the header")));
    }
    let offset = offset as usize;
    let [nx, ny, nz] = header.dims();
    let n = nx * ny * nz;
    let width = (bits_per_voxel(header.datatype)? / 8) as usize;
    let end = offset + n * width;
    if bytes.len() < end {
        return Err(Error::TruncatedFile(format!("voxel data needs {end} bytes, file has {}", bytes.len())));
    }
    let data = &bytes[offset..end];
    let ordered = |c: &[u8], w: usize| -> [u8; 4] {
        let mut b = [0u8; 4];
        b[..w].copy_from_slice(c);
        if endian == Endian::Big {
            b[..w].reverse();
        }
        b
    };
    let raw = match header.datatype {
        DT_UINT8 => RawVoxels::U8(data.to_vec()),
        DT_INT16 => RawVoxels::I16(
            data.chunks_exact(2)
                .map(|c| {
                    let b = ordered(c, 2);
                    i16::from_le_bytes([b[0], b[1]])
                })
                .collect(),
        ),
        _ => RawVoxels::F32(data.chunks_exact(4).map(|c| f32::from_le_bytes(ordered(c, 4))).collect()),
    };
    let voxels = scale(&header, &raw);
    if end < bytes.len() {
        log::debug!("ignoring {} bytes after the first volume", bytes.len() - end);
    }
    Ok(NiftiVolume { extension: bytes[HEADER_SIZE..offset].to_vec(), header, endian, raw, voxels })
}

/// Serialize in the volume's byte order. `write_nifti(&parse_nifti(b)?)`
/// reproduces `b` for single-volume files.
pub fn write_nifti(v: &NiftiVolume) -> Vec<u8> {
    let mut s = Sink { out: Vec::with_capacity(MIN_FILE_SIZE + v.raw.len() * 4), endian: v.endian };
    write_header(&mut s, &v.header);
    s.bytes(&v.extension);
    match &v.raw {
        RawVoxels::U8(d) => s.bytes(d),
        RawVoxels::I16(d) => d.iter().for_each(|&x| s.i16(x)),
        RawVoxels::F32(d) => d.iter().for_each(|&x| s.f32(x)),
    }
    s.out
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiVolume> {
    parse_nifti(&std::fs::read(path)?)
}

pub fn save_nifti(v: &NiftiVolume, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_nifti(v))?;
    Ok(())
}
