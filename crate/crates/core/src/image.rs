//! 8-bit RGB images and the binary PPM (P6) format.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>, // interleaved RGB, row-major
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::usage("image dimensions must be positive"));
        }
        if data.len() != width * height * 3 {
            return Err(Error::usage(format!(
                "image data length {} does not match {width}x{height}x3",
                data.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// HxWx3 tensor with values in [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f32> = self.data.iter().map(|&v| v as f32 / 255.0).collect();
        Tensor::new(vec![self.height, self.width, 3], data).expect("image tensor")
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend_from_slice(&self.data);
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (magic, w, h, maxval, payload) = parse_pnm_header(&bytes)?;
        if magic != "P6" {
            return Err(Error::format(format!("expected P6 magic, got {magic}")));
        }
        if maxval != 255 {
            return Err(Error::format("only maxval 255 PPM is supported"));
        }
        if payload.len() < w * h * 3 {
            return Err(Error::format("truncated PPM pixel data"));
        }
        RgbImage::new(w, h, payload[..w * h * 3].to_vec())
    }
}

/// Parse a binary PNM header: magic, dims, maxval; returns the payload
/// after the single whitespace byte that terminates the header.
pub(crate) fn parse_pnm_header(bytes: &[u8]) -> Result<(String, usize, usize, u32, &[u8])> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated PNM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(bytes)?;
    let w: usize = token(bytes)?
        .parse()
        .map_err(|_| Error::format("bad PNM width"))?;
    let h: usize = token(bytes)?
        .parse()
        .map_err(|_| Error::format("bad PNM height"))?;
    let maxval: u32 = token(bytes)?
        .parse()
        .map_err(|_| Error::format("bad PNM maxval"))?;
    if pos >= bytes.len() {
        return Err(Error::format("PNM header not followed by pixel data"));
    }
    pos += 1; // single whitespace byte after maxval
    Ok((magic, w, h, maxval, &bytes[pos..]))
}
