mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reftok::codec::TokenStream;
use reftok::dataio::{decode_rvc, encode_rvc, VideoClip};
use reftok::patchgrid::{GridShape, PatchSpec};
use reftok::Error;

use common::FORMAT_CASES;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_format_roundtrips(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, case) in FORMAT_CASES {
            if let Err(e) = case(&mut rng) {
                prop_assert!(false, "{name}: {e}");
            }
        }
    }

    #[test]
    fn truncated_streams_are_corrupt(frac in 0.0f64..1.0) {
        let stream = TokenStream {
            n_ref_frames: 1,
            grid: GridShape { tau: 2, eta: 2, omega: 2 },
            codebook_size: 300,
            patch: PatchSpec { t: 1, h: 2, w: 2 },
            height: 4,
            width: 4,
            reference: vec![7; 48],
            indices: vec![1, 2, 3, 4, 5, 6, 7, 299],
        };
        let bytes = stream.to_bytes().unwrap();
        let cut = ((bytes.len() as f64) * frac) as usize;
        let res = TokenStream::from_bytes(&bytes[..cut]);
        prop_assert!(matches!(res, Err(Error::Corrupt { .. })), "cut at {} of {}", cut, bytes.len());
    }
}

#[test]
fn rvc_rejects_truncation_and_padding() {
    let payload: Vec<u8> = (0..8 * 8 * 3).map(|i| i as u8).collect();
    let clip = VideoClip::from_u8(&payload, 1, 8, 8, 3).unwrap();
    let bytes = encode_rvc(&clip);
    assert!(matches!(decode_rvc(&bytes[..bytes.len() - 1]), Err(Error::Corrupt { .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_rvc(&long), Err(Error::Corrupt { .. })));
    assert_eq!(decode_rvc(&bytes).unwrap().to_u8(), payload);
}
