//! NIfTI-1 fixtures built byte by byte, independent of the library writer.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    U8,
    I16,
    F32,
}

impl Dtype {
    pub const ALL: [Dtype; 3] = [Dtype::U8, Dtype::I16, Dtype::F32];

    fn code_bits(self) -> (i16, i16) {
        match self {
            Dtype::U8 => (2, 8),
            Dtype::I16 => (4, 16),
            Dtype::F32 => (16, 32),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: String,
    pub bytes: Vec<u8>,
    pub dims: [usize; 3],
    /// Voxel values after scaling, in file order.
    pub expected: Vec<f32>,
}

struct Writer {
    big: bool,
    buf: Vec<u8>,
}

impl Writer {
    fn put(&mut self, at: usize, le: &[u8]) {
        let mut b = le.to_vec();
        if self.big {
            b.reverse();
        }
        self.buf[at..at + b.len()].copy_from_slice(&b);
    }
    fn i16(&mut self, at: usize, v: i16) {
        self.put(at, &v.to_le_bytes());
    }
    fn i32(&mut self, at: usize, v: i32) {
        self.put(at, &v.to_le_bytes());
    }
    fn f32(&mut self, at: usize, v: f32) {
        self.put(at, &v.to_le_bytes());
    }
}

/// A 4×3×2 volume with a few non-zero bookkeeping fields so a faithful
/// round trip has something to preserve.
pub fn build(dtype: Dtype, big: bool, slope: Option<(f32, f32)>) -> Fixture {
    let dims = [4usize, 3, 2];
    let n = dims.iter().product::<usize>();
    let mut w = Writer { big, buf: vec![0u8; 352] };
    w.i32(0, 348);
    let dim = [3i16, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        w.i16(40 + 2 * i, *d);
    }
    let (code, bits) = dtype.code_bits();
    w.i16(70, code);
    w.i16(72, bits);
    for (i, p) in [1.0f32, 1.0, 1.2, 2.5, 0.0, 0.0, 0.0, 0.0].iter().enumerate() {
        w.f32(76 + 4 * i, *p);
    }
    w.f32(108, 352.0);
    let (s, inter) = slope.unwrap_or((0.0, 0.0));
    w.f32(112, s);
    w.f32(116, inter);
    w.buf[123] = 10; // xyzt_units
    w.buf[148..148 + 16].copy_from_slice(b"fixture volume\0\0");
    w.i16(252, 1); // qform_code
    w.f32(268, -90.0); // qoffset_x
    w.buf[344..348].copy_from_slice(b"n+1\0");

    let raw: Vec<f64> = (0..n).map(|i| i as f64 * 3.0 - if dtype == Dtype::U8 { 0.0 } else { 20.0 }).collect();
    for &v in &raw {
        let le: Vec<u8> = match dtype {
            Dtype::U8 => vec![v as u8],
            Dtype::I16 => (v as i16).to_le_bytes().to_vec(),
            Dtype::F32 => ((v as f32) + 0.25).to_le_bytes().to_vec(),
        };
        let mut b = le;
        if big {
            b.reverse();
        }
        w.buf.extend_from_slice(&b);
    }
    let stored = |v: f64| match dtype {
        Dtype::F32 => v + 0.25,
        _ => v,
    };
    let expected = raw
        .iter()
        .map(|&v| match slope {
            Some((s, i)) if s != 0.0 => (stored(v) as f32) * s + i,
            _ => stored(v) as f32,
        })
        .collect();
    let name =
        format!("{:?}-{}-{}", dtype, if big { "be" } else { "le" }, if slope.is_some() { "scaled" } else { "raw" });
    Fixture { name, bytes: w.buf, dims, expected }
}

/// Every dtype × endianness × scaling combination.
pub fn all() -> Vec<Fixture> {
    let mut out = Vec::new();
    for d in Dtype::ALL {
        for big in [false, true] {
            for slope in [None, Some((0.5f32, 2.0f32))] {
                out.push(build(d, big, slope));
            }
        }
    }
    out
}
