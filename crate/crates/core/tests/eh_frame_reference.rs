//! `.eh_frame` parsing against records produced by an independent writer.

use dissect_core::funcid::eh_frame::parse;
use dissect_core::Mode;
use gimli::write::{Address, CommonInformationEntry, EhFrame, EndianVec, FrameDescriptionEntry, FrameTable};
use gimli::{Encoding, Format, LittleEndian, Register};
use proptest::prelude::*;

fn encode(funcs: &[(u64, u32)], section_vaddr: u64, mode: Mode, pcrel: bool) -> Vec<u8> {
    let address_size = mode.pointer_size() as u8;
    let encoding = Encoding {
        format: Format::Dwarf32,
        version: 1,
        address_size,
    };
    let mut table = FrameTable::default();
    let mut cie = CommonInformationEntry::new(encoding, 1, -(address_size as i8), Register(16));
    if pcrel {
        cie.fde_address_encoding = gimli::DW_EH_PE_pcrel | gimli::DW_EH_PE_sdata4;
    }
    let id = table.add_cie(cie);
    for &(loc, len) in funcs {
        let stored = if pcrel { loc.wrapping_sub(section_vaddr) } else { loc };
        table.add_fde(id, FrameDescriptionEntry::new(Address::Constant(stored), len));
    }
    let mut out = EhFrame(EndianVec::new(LittleEndian));
    table.write_eh_frame(&mut out).expect("write");
    out.0.into_vec()
}

proptest! {
    #[test]
    fn initial_locations_match(
        funcs in proptest::collection::vec((0x1000u64..0x0fff_0000, 1u32..0x10000), 0..24),
        wide in any::<bool>(),
        pcrel in any::<bool>(),
        section in 0x1000u64..0x0100_0000,
    ) {
        let mode = if wide { Mode::X64 } else { Mode::X86 };
        let data = encode(&funcs, section, mode, pcrel);
        let fdes = parse(&data, section, mode).expect("parses");
        let got: Vec<(u64, u64)> = fdes.iter().map(|f| (f.initial_location, f.address_range)).collect();
        let want: Vec<(u64, u64)> = funcs.iter().map(|&(a, n)| (a, u64::from(n))).collect();
        prop_assert_eq!(got, want);
    }
}

#[test]
fn two_cies_are_both_honoured() {
    let enc = Encoding {
        format: Format::Dwarf32,
        version: 1,
        address_size: 8,
    };
    let mut table = FrameTable::default();
    let abs = table.add_cie(CommonInformationEntry::new(enc, 1, -8, Register(16)));
    let mut rel = CommonInformationEntry::new(enc, 4, -8, Register(16));
    rel.fde_address_encoding = gimli::DW_EH_PE_pcrel | gimli::DW_EH_PE_sdata4;
    let rel = table.add_cie(rel);
    table.add_fde(abs, FrameDescriptionEntry::new(Address::Constant(0x401000), 0x20));
    table.add_fde(rel, FrameDescriptionEntry::new(Address::Constant(0x2000), 0x30));
    let mut out = EhFrame(EndianVec::new(LittleEndian));
    table.write_eh_frame(&mut out).unwrap();
    let fdes = parse(&out.0.into_vec(), 0x400000, Mode::X64).unwrap();
    let locs: Vec<u64> = fdes.iter().map(|f| f.initial_location).collect();
    assert_eq!(locs, vec![0x401000, 0x402000]);
}
