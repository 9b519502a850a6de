//! Binary netpbm I/O: RGB images as P6, masks and gray maps as P5, maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

struct Header {
    width: usize,
    height: usize,
    payload: usize,
}

fn skip_space(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(b'#') => {
                while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                    pos += 1;
                }
            }
            _ => return pos,
        }
    }
}

fn read_uint(bytes: &[u8], pos: usize, what: &str) -> Result<(usize, usize)> {
    let pos = skip_space(bytes, pos);
    let end = pos + bytes[pos..].iter().take_while(|b| b.is_ascii_digit()).count();
    if end == pos {
        return Err(parse_err(pos, format!("expected {what}")));
    }
    let text = std::str::from_utf8(&bytes[pos..end]).expect("digits are ascii");
    let v = text.parse().map_err(|_| parse_err(pos, format!("{what} out of range")))?;
    Ok((v, end))
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(parse_err(0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let (width, pos) = read_uint(bytes, 2, "width")?;
    let (height, pos) = read_uint(bytes, pos, "height")?;
    let (maxval, pos) = read_uint(bytes, pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(parse_err(pos, "zero image extent"));
    }
    if maxval != 255 {
        return Err(parse_err(pos, format!("unsupported maxval {maxval}")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(parse_err(pos, "expected whitespace after maxval")),
    }
    Ok(Header {
        width,
        height,
        payload: pos + 1,
    })
}

fn payload<'b>(bytes: &'b [u8], h: &Header, channels: usize) -> Result<&'b [u8]> {
    let need = h.width * h.height * channels;
    let have = bytes.len() - h.payload;
    if have < need {
        return Err(parse_err(bytes.len(), format!("truncated payload: {have} of {need} bytes")));
    }
    Ok(&bytes[h.payload..h.payload + need])
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[3, H, W]` image as P6.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [3, h, w] = image.shape() else {
        return Err(Error::dim("encode_ppm", image.shape(), &[3]));
    };
    let (h, w) = (*h, *w);
    let n = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..n {
        for c in 0..3 {
            out.push(quantize(d[c * n + i]));
        }
    }
    Ok(out)
}

/// Decodes P6 bytes into a `[3, H, W]` image in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes, b"P6")?;
    let px = payload(bytes, &h, 3)?;
    let n = h.width * h.height;
    let mut data = vec![0.0f32; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = px[3 * i + c] as f32 / 255.0;
        }
    }
    Tensor::new([3, h.height, h.width], data)
}

/// Encodes an `[H, W]` map in `[0, 1]` as P5.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = map.shape() else {
        return Err(Error::dim("encode_pgm", map.shape(), &[]));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Decodes P5 bytes into an `[H, W]` map of `value / 255`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes, b"P5")?;
    let px = payload(bytes, &h, 1)?;
    Tensor::new([h.height, h.width], px.iter().map(|&b| b as f32 / 255.0).collect())
}

/// Decodes a P5 mask whose pixels are all 0 or 255 into a 0/1 map.
pub fn decode_mask(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes, b"P5")?;
    let px = payload(bytes, &h, 1)?;
    let mut data = Vec::with_capacity(px.len());
    for (i, &b) in px.iter().enumerate() {
        data.push(match b {
            0 => 0.0,
            255 => 1.0,
            other => return Err(parse_err(h.payload + i, format!("mask value {other} is not 0 or 255"))),
        });
    }
    Tensor::new([h.height, h.width], data)
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_ppm(image)?)?)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}

/// Writes a map as P5; a 0/1 mask becomes 0/255.
pub fn save_mask(path: &Path, mask: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_pgm(mask)?)?)
}

pub fn load_mask(path: &Path) -> Result<Tensor> {
    decode_mask(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p5_fixture() {
        let bytes = b"P5\n2 2\n255\n\x00\xff\x80\x00";
        let t = decode_pgm(bytes).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 128.0 / 255.0, 0.0]);
        assert!(decode_mask(bytes).is_err());
        let m = decode_mask(b"P5 2 1 255\n\xff\x00").unwrap();
        assert_eq!(m.data(), &[1.0, 0.0]);
    }

    #[test]
    fn comments_in_header() {
        let t = decode_pgm(b"P5\n# made by hand\n1 1\n255\n\x10").unwrap();
        assert_eq!(t.data(), &[16.0 / 255.0]);
    }

    #[test]
    fn errors_carry_offsets() {
        match decode_pgm(b"P6\n1 1\n255\n\x00") {
            Err(Error::Parse { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        match decode_pgm(b"P5\n2 2\n255\n\x00\x00") {
            Err(Error::Parse { offset: 13, .. }) => {}
            other => panic!("{other:?}"),
        }
        match decode_pgm(b"P5\n2 x\n255\n") {
            Err(Error::Parse { offset: 5, .. }) => {}
            other => panic!("{other:?}"),
        }
        match decode_pgm(b"P5\n1 1\n65535\n\x00\x00") {
            Err(Error::Parse { msg, .. }) => assert!(msg.contains("maxval")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trips() {
        let img = Tensor::new([3, 2, 3], (0..18).map(|i| i as f32 / 17.0).collect()).unwrap();
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert_eq!(back.shape(), img.shape());
        let err = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err <= 1.0 / 255.0);

        let mask = Tensor::new([2, 3], vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let back = decode_mask(&encode_pgm(&mask).unwrap()).unwrap();
        assert!(back.bitwise_eq(&mask));
    }
}
