//! Mask-pruned parameter payloads and their little-endian wire format.
//!
//! Layout: a 16-byte header (`b"FDRA"`, version `u8`, flags `u8`, site count
//! `u16`, round `u32`, sample count `u32`), one mask bitset per site
//! (`ceil(r_init / 8)` bytes, LSB-first), then per site and per retained
//! triplet in ascending order the `B` column, the `E` entry (truncated SVD
//! only) and the `A` row, and finally the head weights and bias. All values
//! are `f32`.

use crate::error::{Error, Result};
use crate::rank_alloc::RankMask;
use crate::trainer::TinyModel;

pub const MAGIC: [u8; 4] = *b"FDRA";
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 16;
const FLAG_DIAG: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SiteShape {
    pub d_out: usize,
    pub d_in: usize,
    pub r_init: usize,
}

/// Shapes needed to size, encode and decode payloads for one model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub sites: Vec<SiteShape>,
    pub head_len: usize,
    pub has_diag: bool,
}

impl Layout {
    pub fn of(model: &TinyModel) -> Layout {
        Layout {
            sites: model
                .sites()
                .iter()
                .map(|s| SiteShape {
                    d_out: s.d_out(),
                    d_in: s.d_in(),
                    r_init: s.r_init(),
                })
                .collect(),
            head_len: model.head_len(),
            has_diag: model.sites()[0].flavor().has_diag(),
        }
    }

    /// Scalars per retained triplet at `site`.
    pub fn triplet_width(&self, site: usize) -> usize {
        let s = self.sites[site];
        s.d_out + s.d_in + usize::from(self.has_diag)
    }

    pub fn check_mask(&self, mask: &RankMask) -> Result<()> {
        let shape: Vec<usize> = self.sites.iter().map(|s| s.r_init).collect();
        if mask.shape() != shape {
            return Err(Error::contract(format!(
                "mask shape {:?} does not match adapter ranks {shape:?}",
                mask.shape()
            )));
        }
        Ok(())
    }

    /// Bytes spent on retained adapter triplets.
    pub fn adapter_param_bytes(&self, mask: &RankMask) -> usize {
        (0..self.sites.len())
            .map(|n| 4 * mask.site_count(n) * self.triplet_width(n))
            .sum()
    }

    /// Bytes spent on all mask bitsets.
    pub fn mask_bytes(&self) -> usize {
        self.sites.iter().map(|s| s.r_init.div_ceil(8)).sum()
    }

    /// Closed-form encoded size of a payload pruned by `mask`.
    pub fn payload_size(&self, mask: &RankMask) -> usize {
        self.adapter_param_bytes(mask) + 4 * self.head_len + self.mask_bytes() + HEADER_BYTES
    }
}

/// Packs booleans LSB-first into bytes; padding bits are zero.
pub fn pack_bits(bits: &[bool], out: &mut Vec<u8>) {
    for chunk in bits.chunks(8) {
        let mut byte = 0u8;
        for (i, &b) in chunk.iter().enumerate() {
            byte |= u8::from(b) << i;
        }
        out.push(byte);
    }
}

/// Inverse of [`pack_bits`]; nonzero padding bits are rejected.
pub fn unpack_bits(bytes: &[u8], n: usize) -> Result<Vec<bool>> {
    if bytes.len() != n.div_ceil(8) {
        return Err(Error::CorruptPayload(format!(
            "bitset of {} bytes cannot hold exactly {n} bits",
            bytes.len()
        )));
    }
    let bits: Vec<bool> = (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
    if !n.is_multiple_of(8) && bytes[n / 8] >> (n % 8) != 0 {
        return Err(Error::CorruptPayload("nonzero padding bits in mask".into()));
    }
    Ok(bits)
}

/// Decoded payload contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Payload {
    pub round: u32,
    /// Local sample count, used as the aggregation weight.
    pub sample_count: u32,
    pub mask: RankMask,
    /// Per site, the retained triplets concatenated in ascending slot order.
    pub sites: Vec<Vec<f32>>,
    /// Head weights (row-major) followed by the head bias.
    pub head: Vec<f32>,
}

/// Extracts the triplets retained by `mask` and the full head, rounded to `f32`.
pub fn comm_prune_encode(model: &TinyModel, mask: &RankMask, sample_count: u32, round: u32) -> Result<Payload> {
    let layout = Layout::of(model);
    layout.check_mask(mask)?;
    let has_diag = layout.has_diag;
    let sites = model
        .sites()
        .iter()
        .enumerate()
        .map(|(n, site)| {
            let mut values = Vec::with_capacity(mask.site_count(n) * layout.triplet_width(n));
            for i in (0..site.r_init()).filter(|&i| mask.site(n)[i]) {
                let (b_col, e, a_row) = site.triplet(i);
                values.extend(b_col.iter().map(|&v| v as f32));
                if has_diag {
                    values.push(e as f32);
                }
                values.extend(a_row.iter().map(|&v| v as f32));
            }
            values
        })
        .collect();
    let head = model
        .head_w()
        .data()
        .iter()
        .chain(model.head_b())
        .map(|&v| v as f32)
        .collect();
    Ok(Payload {
        round,
        sample_count,
        mask: mask.clone(),
        sites,
        head,
    })
}

impl Payload {
    pub fn to_bytes(&self, layout: &Layout) -> Result<Vec<u8>> {
        layout.check_mask(&self.mask)?;
        let site_count = u16::try_from(layout.sites.len())
            .map_err(|_| Error::contract("too many adapter sites for the wire format"))?;
        let mut out = Vec::with_capacity(layout.payload_size(&self.mask));
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(if layout.has_diag { FLAG_DIAG } else { 0 });
        out.extend_from_slice(&site_count.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.sample_count.to_le_bytes());
        for site in self.mask.sites() {
            pack_bits(site, &mut out);
        }
        for (n, values) in self.sites.iter().enumerate() {
            if values.len() != self.mask.site_count(n) * layout.triplet_width(n) {
                return Err(Error::contract(format!("site {n} value count does not match its mask")));
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if self.head.len() != layout.head_len {
            return Err(Error::contract("head length does not match the layout"));
        }
        for v in &self.head {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], layout: &Layout) -> Result<Payload> {
        let corrupt = |m: String| Error::CorruptPayload(m);
        if bytes.len() < HEADER_BYTES {
            return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(corrupt(format!("unsupported version {}", bytes[4])));
        }
        let flags = bytes[5];
        if flags & !FLAG_DIAG != 0 || (flags & FLAG_DIAG != 0) != layout.has_diag {
            return Err(corrupt(format!("flags {flags:#04x} do not match the adapter flavor")));
        }
        let site_count = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        if site_count != layout.sites.len() {
            return Err(corrupt(format!(
                "payload has {site_count} sites, model has {}",
                layout.sites.len()
            )));
        }
        let round = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        let sample_count = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
        let mut pos = HEADER_BYTES;
        let mut masks = Vec::with_capacity(site_count);
        for s in &layout.sites {
            let len = s.r_init.div_ceil(8);
            let chunk = bytes
                .get(pos..pos + len)
                .ok_or_else(|| corrupt("truncated mask section".into()))?;
            masks.push(unpack_bits(chunk, s.r_init)?);
            pos += len;
        }
        let mask = RankMask::new(masks);
        let expected = layout.payload_size(&mask);
        if bytes.len() != expected {
            return Err(corrupt(format!(
                "payload is {} bytes, mask implies {expected}",
                bytes.len()
            )));
        }
        let mut read_f32s = |count: usize| -> Vec<f32> {
            let vals = bytes[pos..pos + 4 * count]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            pos += 4 * count;
            vals
        };
        let sites = (0..site_count)
            .map(|n| read_f32s(mask.site_count(n) * layout.triplet_width(n)))
            .collect();
        let head = read_f32s(layout.head_len);
        Ok(Payload {
            round,
            sample_count,
            mask,
            sites,
            head,
        })
    }
}

/// Writes aggregated or decoded values into `model`: every site is first
/// pruned by `mask`, then retained triplets and the head are overwritten.
pub(crate) fn write_values(model: &mut TinyModel, mask: &RankMask, sites: &[Vec<f64>], head: &[f64]) -> Result<()> {
    let layout = Layout::of(model);
    layout.check_mask(mask)?;
    if sites.len() != layout.sites.len() || head.len() != layout.head_len {
        return Err(Error::CorruptPayload("value sections do not match the model".into()));
    }
    for (n, values) in sites.iter().enumerate() {
        let width = layout.triplet_width(n);
        if values.len() != mask.site_count(n) * width {
            return Err(Error::CorruptPayload(format!("site {n} carries the wrong number of values")));
        }
    }
    let has_diag = layout.has_diag;
    for (n, (site, values)) in model.sites_mut().iter_mut().zip(sites).enumerate() {
        site.apply_mask(mask.site(n))?;
        let (d_out, d_in) = (site.d_out(), site.d_in());
        let width = layout.triplet_width(n);
        let retained = (0..site.r_init()).filter(|&i| mask.site(n)[i]);
        for (i, chunk) in retained.zip(values.chunks_exact(width)) {
            let e = if has_diag { chunk[d_out] } else { 1.0 };
            site.set_triplet(i, &chunk[..d_out], e, &chunk[width - d_in..]);
        }
    }
    let (head_w, head_b) = model.head_mut();
    let split = head_w.data().len();
    head_w.data_mut().copy_from_slice(&head[..split]);
    head_b.copy_from_slice(&head[split..]);
    Ok(())
}

/// Reconstructs a model from a received payload. Positions outside `mask`
/// are zeroed; the payload must carry exactly `mask`.
pub fn decode_apply(model: &mut TinyModel, payload: &Payload, mask: &RankMask) -> Result<()> {
    if &payload.mask != mask {
        return Err(Error::CorruptPayload("payload mask differs from the expected mask".into()));
    }
    let widen = |v: &[f32]| v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>();
    let sites: Vec<Vec<f64>> = payload.sites.iter().map(|s| widen(s)).collect();
    write_values(model, mask, &sites, &widen(&payload.head))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterConfig, Flavor};
    use crate::numerics::{Matrix, Rng};
    use crate::trainer::NUM_SITES;

    fn model(flavor: Flavor, seed: u64) -> TinyModel {
        let mut rng = Rng::new(seed);
        let bases: Vec<Matrix> = (0..NUM_SITES)
            .map(|_| Matrix::gaussian(&mut rng, 16, 16, 0.25).unwrap())
            .collect();
        let mut m = TinyModel::new(&mut rng, &bases, 4, &AdapterConfig::new(flavor, 8)).unwrap();
        // give every trainable value a distinct nonzero entry
        for site in m.sites_mut() {
            let (b, e, a) = site.trainable_mut();
            b.iter_mut().chain(a.iter_mut()).for_each(|v| *v = rng.normal());
            if let Some(e) = e {
                e.iter_mut().for_each(|v| *v = rng.normal());
            }
        }
        let w = Matrix::gaussian(&mut rng, 4, 16, 1.0).unwrap();
        let b = (0..4).map(|_| rng.normal()).collect();
        m.set_head(w, b).unwrap();
        m
    }

    #[test]
    fn all_true_size_matches_hand_count() {
        let m = model(Flavor::TruncSvd, 1);
        let mask = RankMask::all_true(&[8; 4]);
        let bytes = comm_prune_encode(&m, &mask, 5, 0)
            .unwrap()
            .to_bytes(&Layout::of(&m))
            .unwrap();
        assert_eq!(bytes.len(), 4516);
        assert_eq!(Layout::of(&m).payload_size(&mask), 4516);
    }

    #[test]
    fn all_false_keeps_head_masks_header() {
        let m = model(Flavor::TruncSvd, 2);
        let mask = RankMask::new(vec![vec![false; 8]; 4]);
        let bytes = comm_prune_encode(&m, &mask, 5, 0)
            .unwrap()
            .to_bytes(&Layout::of(&m))
            .unwrap();
        assert_eq!(bytes.len(), 4 * 68 + 4 + 16);
    }

    #[test]
    fn lora_payload_omits_diagonal() {
        let m = model(Flavor::Lora, 3);
        let mask = RankMask::all_true(&[8; 4]);
        let layout = Layout::of(&m);
        let bytes = comm_prune_encode(&m, &mask, 1, 0).unwrap().to_bytes(&layout).unwrap();
        assert_eq!(bytes.len(), 4 * 8 * 32 * 4 + 4 * 68 + 4 + 16);
    }

    #[test]
    fn round_trip_is_bit_exact_in_f32() {
        for flavor in [Flavor::TruncSvd, Flavor::Lora] {
            let m = model(flavor, 4);
            let layout = Layout::of(&m);
            let mut rng = Rng::new(9);
            let mask = RankMask::new((0..4).map(|_| (0..8).map(|_| rng.below(2) == 1).collect()).collect());
            let p = comm_prune_encode(&m, &mask, 77, 12).unwrap();
            let bytes = p.to_bytes(&layout).unwrap();
            assert_eq!(bytes.len(), layout.payload_size(&mask));
            let back = Payload::from_bytes(&bytes, &layout).unwrap();
            assert_eq!(back, p);
            assert_eq!((back.round, back.sample_count), (12, 77));
        }
    }

    #[test]
    fn decode_apply_after_encode_rounds_only() {
        let m = model(Flavor::TruncSvd, 5);
        let mask = RankMask::from_adapters(m.sites());
        let p = comm_prune_encode(&m, &mask, 1, 0).unwrap();
        let mut copy = m.clone();
        decode_apply(&mut copy, &p, &mask).unwrap();
        for (a, b) in copy.sites().iter().zip(m.sites()) {
            for (x, y) in a.b().data().iter().zip(b.b().data()) {
                assert_eq!(*x, f64::from(*y as f32));
            }
            for (x, y) in a.e().iter().zip(b.e()) {
                assert_eq!(*x, f64::from(*y as f32));
            }
        }
        assert_eq!(copy.base_checksum(), m.base_checksum());
    }

    #[test]
    fn dead_positions_zeroed_on_apply() {
        let m = model(Flavor::TruncSvd, 6);
        let mut mask_sites = vec![vec![true; 8]; 4];
        mask_sites[1][3] = false;
        let mask = RankMask::new(mask_sites);
        let p = comm_prune_encode(&m, &mask, 1, 0).unwrap();
        let mut local = m.clone();
        decode_apply(&mut local, &p, &mask).unwrap();
        let (b, e, a) = local.sites()[1].triplet(3);
        assert!(b.iter().all(|&v| v == 0.0) && e == 0.0 && a.iter().all(|&v| v == 0.0));
        assert!(!local.sites()[1].alive()[3]);
    }

    #[test]
    fn empty_payload_zeroes_every_update() {
        let m = model(Flavor::TruncSvd, 7);
        let mask = RankMask::new(vec![vec![false; 8]; 4]);
        let p = comm_prune_encode(&m, &mask, 1, 0).unwrap();
        let mut local = m.clone();
        decode_apply(&mut local, &p, &mask).unwrap();
        assert!(local.sites().iter().all(|s| s.delta_w().is_zero()));
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let m = model(Flavor::TruncSvd, 8);
        let layout = Layout::of(&m);
        let mask = RankMask::all_true(&[8; 4]);
        let good = comm_prune_encode(&m, &mask, 1, 0).unwrap().to_bytes(&layout).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let truncated = &good[..good.len() - 1];
        let mut bad_mask = good.clone();
        bad_mask[HEADER_BYTES] = 0x7f;
        let mut bad_flags = good.clone();
        bad_flags[5] = 0;
        for bytes in [&bad_magic[..], truncated, &bad_mask[..], &bad_flags[..], &good[..4]] {
            assert!(matches!(Payload::from_bytes(bytes, &layout), Err(Error::CorruptPayload(_))));
        }
    }

    #[test]
    fn mismatched_mask_rejected() {
        let m = model(Flavor::TruncSvd, 9);
        let all = RankMask::all_true(&[8; 4]);
        let p = comm_prune_encode(&m, &all, 1, 0).unwrap();
        let mut fewer = vec![vec![true; 8]; 4];
        fewer[0][0] = false;
        let mut local = m.clone();
        assert!(matches!(
            decode_apply(&mut local, &p, &RankMask::new(fewer)),
            Err(Error::CorruptPayload(_))
        ));
        assert!(matches!(
            comm_prune_encode(&m, &RankMask::all_true(&[8; 3]), 1, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn bits_pack_lsb_first() {
        let mut out = Vec::new();
        pack_bits(&[true, false, false, false, false, false, false, false, false, true], &mut out);
        assert_eq!(out, vec![0x01, 0x02]);
        assert!(unpack_bits(&out, 10).unwrap()[9]);
        assert!(unpack_bits(&[0x04], 2).is_err());
    }
}
