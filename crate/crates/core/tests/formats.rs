use lesionseg::imgio::*;
use lesionseg::nn::UNetConfig;
use lesionseg::stats::ChannelStats;
use proptest::prelude::*;

fn reference_index(p: usize, x: usize, y: usize, w: usize, h: usize) -> usize {
    p * w * h + y * w + x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ppm_pixels_land_plane_major(
        (w, h, px) in (1usize..9, 1usize..9).prop_flat_map(|(w, h)| {
            (Just(w), Just(h), prop::collection::vec(any::<u8>(), 3 * w * h))
        }),
        probes in prop::collection::vec((0usize..64, 0usize..64), 1..16),
    ) {
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        bytes.extend_from_slice(&px);
        let img = decode_ppm(&bytes).unwrap();
        for (px_x, px_y) in probes {
            let (x, y) = (px_x % w, px_y % h);
            for p in 0..3 {
                // interleaved source: (y * w + x) * 3 + p
                let expected = px[(y * w + x) * 3 + p] as f32 / 255.0;
                prop_assert_eq!(img.data[reference_index(p, x, y, w, h)], expected);
                prop_assert_eq!(img.plane(p)[y * w + x], expected);
                prop_assert_eq!(img.pixel(x, y)[p], expected);
            }
        }
    }

    #[test]
    fn smf_planes_land_plane_major(
        (w, h, planes) in (1usize..7, 1usize..7, 1usize..3).prop_flat_map(|(w, h, p)| {
            (Just(w), Just(h), prop::collection::vec(prop::collection::vec(-1e3f32..1e3, w * h), p))
        }),
    ) {
        let bytes = encode_smf(&SmfRaster { width: w, height: h, planes: planes.clone() });
        let floats: Vec<f32> = bytes[SMF_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        for (p, plane) in planes.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    prop_assert_eq!(floats[reference_index(p, x, y, w, h)], plane[y * w + x]);
                }
            }
        }
    }

    #[test]
    fn decoders_never_panic_on_garbage(bytes in prop::collection::vec(any::<u8>(), 0..96)) {
        let _ = decode_ppm(&bytes);
        let _ = decode_pgm(&bytes);
        let _ = decode_smf(&bytes);
        let _ = decode_checkpoint(&bytes);
    }

    #[test]
    fn decoders_never_panic_on_damaged_headers(
        w in 0u64..u64::MAX, h in 0u64..u64::MAX, tail in prop::collection::vec(any::<u8>(), 0..32),
    ) {
        let mut p6 = format!("P6\n{w} {h}\n255\n").into_bytes();
        p6.extend_from_slice(&tail);
        prop_assert!(decode_ppm(&p6).is_err() || (w as u128) * (h as u128) * 3 <= tail.len() as u128);
        let mut smf = b"SMF1".to_vec();
        smf.extend_from_slice(&(w as u32).to_le_bytes());
        smf.extend_from_slice(&(h as u32).to_le_bytes());
        smf.extend_from_slice(&2u32.to_le_bytes());
        smf.extend_from_slice(&tail);
        let _ = decode_smf(&smf);
    }

    #[test]
    fn checkpoint_decoder_never_panics_on_damaged_config(
        dims in prop::array::uniform4(any::<u32>()), count in any::<u64>(),
        tail in prop::collection::vec(any::<u8>(), 0..32),
    ) {
        let mut ck = b"UNET".to_vec();
        ck.extend_from_slice(&1u32.to_le_bytes());
        for d in dims {
            ck.extend_from_slice(&d.to_le_bytes());
        }
        for _ in 0..6 {
            ck.extend_from_slice(&0.5f64.to_le_bytes());
        }
        ck.extend_from_slice(&count.to_le_bytes());
        ck.extend_from_slice(&tail);
        let _ = decode_checkpoint(&ck);
    }

    #[test]
    fn truncating_a_valid_file_is_an_error(cut in 0usize..1000) {
        let cfg = UNetConfig::new(1, 1);
        let ck = Checkpoint {
            config: cfg,
            params: vec![0.5; cfg.param_count()],
            normalization: ChannelStats { mean: [0.5; 3], std: [0.2; 3] },
        };
        let files = [
            encode_ppm(&RgbImage::filled(3, 2, [0.1, 0.2, 0.3])),
            encode_pgm(&Mask::zeros(3, 2)),
            encode_smf(&SmfRaster { width: 3, height: 2, planes: vec![vec![1.0; 6]; 2] }),
            encode_checkpoint(&ck),
        ];
        for bytes in files {
            let at = cut % bytes.len();
            let short = &bytes[..at];
            prop_assert!(
                decode_ppm(short).is_err()
                    && decode_pgm(short).is_err()
                    && decode_smf(short).is_err()
                    && decode_checkpoint(short).is_err()
            );
        }
    }
}

#[test]
fn ppm_examples() {
    let img = decode_ppm(b"P6\n2 1\n255\n\x00\x00\x00\xff\xff\xff").unwrap();
    assert_eq!(img.plane(0), &[0.0, 1.0]);
    assert_eq!(img.plane(1), &[0.0, 1.0]);
    assert_eq!(img.plane(2), &[0.0, 1.0]);
    assert_eq!(
        encode_ppm(&RgbImage::filled(1, 1, [1.0, 1.0, 1.0])),
        b"P6\n1 1\n255\n\xff\xff\xff"
    );
    // 0.5 * 255 = 127.5 rounds up
    assert_eq!(*encode_ppm(&RgbImage::filled(1, 1, [0.5; 3])).last().unwrap(), 128);
    let commented = decode_ppm(b"P6\n# made by hand\n1 1\n255\n\xff\x00\x00").unwrap();
    assert_eq!(commented.data, vec![1.0, 0.0, 0.0]);
}

#[test]
fn smf_header_bytes() {
    let raster = SmfRaster {
        width: 3,
        height: 2,
        planes: vec![vec![0.0; 6], vec![1.0; 6]],
    };
    let bytes = encode_smf(&raster);
    assert_eq!(
        &bytes[..16],
        b"SMF1\x03\x00\x00\x00\x02\x00\x00\x00\x02\x00\x00\x00"
    );
    assert_eq!(bytes.len(), 16 + 4 * 12);
}
