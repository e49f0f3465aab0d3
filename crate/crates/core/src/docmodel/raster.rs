//! Grayscale page images in binary PGM (P5) form.

use std::io::Write;
use std::path::Path;

use super::{DocError, NormBox};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub w: u32,
    pub h: u32,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn new(w: u32, h: u32, pixels: Vec<u8>) -> Result<Raster, DocError> {
        if pixels.len() != (w as usize) * (h as usize) {
            return Err(DocError::BadRaster {
                path: "<memory>".into(),
                why: format!("{} pixels for {w}x{h}", pixels.len()),
            });
        }
        Ok(Raster { w, h, pixels })
    }

    pub fn blank(w: u32, h: u32) -> Raster {
        Raster {
            w,
            h,
            pixels: vec![255; (w as usize) * (h as usize)],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[(y * self.w + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        self.pixels[(y * self.w + x) as usize] = v;
    }

    /// Nearest-neighbor resample to `tw` x `th`.
    pub fn resampled(&self, tw: u32, th: u32) -> Raster {
        let mut out = vec![0u8; (tw as usize) * (th as usize)];
        for ty in 0..th {
            let sy = (ty as u64 * self.h as u64 / th as u64) as u32;
            for tx in 0..tw {
                let sx = (tx as u64 * self.w as u64 / tw as u64) as u32;
                out[(ty * tw + tx) as usize] = self.get(sx, sy);
            }
        }
        Raster {
            w: tw,
            h: th,
            pixels: out,
        }
    }

    /// The half-open pixel rectangle covered by a normalized box.
    pub fn pixel_rect(&self, bbox: NormBox) -> (u32, u32, u32, u32) {
        let px = |v: i32, dim: u32| ((v as u64 * dim as u64) / 1000) as u32;
        let x0 = px(bbox.x0, self.w);
        let y0 = px(bbox.y0, self.h);
        let x1 = px(bbox.x1, self.w).max(x0 + 1).min(self.w);
        let y1 = px(bbox.y1, self.h).max(y0 + 1).min(self.h);
        (x0, y0, x1, y1)
    }

    pub fn fill_rect(&mut self, bbox: NormBox, value: u8) {
        let (x0, y0, x1, y1) = self.pixel_rect(bbox);
        for y in y0..y1 {
            for x in x0..x1 {
                self.set(x, y, value);
            }
        }
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), DocError> {
        let io_err = |source| DocError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io_err)?;
        write!(f, "P5\n{} {}\n255\n", self.w, self.h).map_err(io_err)?;
        f.write_all(&self.pixels).map_err(io_err)?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Raster, DocError> {
        let bytes = std::fs::read(path).map_err(|source| DocError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let bad = |why: &str| DocError::BadRaster {
            path: path.display().to_string(),
            why: why.to_string(),
        };
        if !bytes.starts_with(b"P5") {
            return Err(bad("not a binary PGM"));
        }
        // header: magic, width, height, maxval as whitespace-separated
        // tokens, '#' comments allowed; one whitespace byte ends the header.
        let mut pos = 2;
        let mut fields = [0u64; 3];
        for field in fields.iter_mut() {
            while pos < bytes.len() {
                match bytes[pos] {
                    b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                    b'#' => {
                        while pos < bytes.len() && bytes[pos] != b'\n' {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .unwrap()
                .parse()
                .map_err(|_| bad("bad header number"))?;
        }
        if pos >= bytes.len() {
            return Err(bad("missing pixel data"));
        }
        pos += 1; // single whitespace after maxval
        let [w, h, maxval] = fields;
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        let need = (w * h) as usize;
        if bytes.len() - pos < need {
            return Err(bad("pixel data shorter than header promises"));
        }
        Raster::new(w as u32, h as u32, bytes[pos..pos + need].to_vec())
    }
}
