//! Instruction lengths against an independent decoder.

use dissect_core::corpus;
use dissect_core::image::ByteSource;
use dissect_core::{decode_at, Mode};
use proptest::prelude::*;
use yaxpeax_arch::{Decoder, LengthedInstruction, U8Reader};

fn reference_len(mode: Mode, bytes: &[u8]) -> Option<u64> {
    let mut reader = U8Reader::new(bytes);
    match mode {
        Mode::X64 => yaxpeax_x86::long_mode::InstDecoder::default()
            .decode(&mut reader)
            .ok()
            .map(|i| i.len().to_const()),
        Mode::X86 => yaxpeax_x86::protected_mode::InstDecoder::default()
            .decode(&mut reader)
            .ok()
            .map(|i| u64::from(i.len().to_const())),
    }
}

#[test]
fn corpus_instruction_lengths_agree() {
    let mut checked = 0;
    for f in corpus::fixtures() {
        for (&a, inst) in &f.truth.instructions {
            let bytes = f.image.bytes_at(a).expect("mapped");
            let n = bytes.len().min(15);
            assert_eq!(
                reference_len(f.image.mode, &bytes[..n]),
                Some(inst.size),
                "{} at {a:#x}",
                f.name
            );
            let ours = decode_at(&f.image, a, f.image.mode).expect("decodes");
            assert_eq!(u64::from(ours.length), inst.size);
            checked += 1;
        }
    }
    assert!(checked > 200, "{checked}");
}

fn image_of(mode: Mode, bytes: &[u8]) -> dissect_core::BinaryImage {
    use dissect_core::{Section, SectionKind};
    dissect_core::BinaryImage::new(
        "random",
        mode,
        vec![Section {
            name: ".text".into(),
            vaddr: 0x1000,
            size: bytes.len() as u64,
            bytes: bytes.to_vec(),
            kind: SectionKind::Code,
            executable: true,
        }],
        Vec::new(),
        0x1000,
    )
    .expect("image")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn lengths_agree_when_both_decode(bytes in proptest::collection::vec(any::<u8>(), 15), wide in any::<bool>()) {
        let mode = if wide { Mode::X64 } else { Mode::X86 };
        let image = image_of(mode, &bytes);
        if let (Ok(ours), Some(theirs)) = (decode_at(&image, 0x1000, mode), reference_len(mode, &bytes)) {
            prop_assert_eq!(u64::from(ours.length), theirs, "{:02x?}", bytes);
        }
    }
}
