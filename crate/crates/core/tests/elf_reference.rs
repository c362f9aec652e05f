//! Exported fixtures read back by an independent ELF reader.

use dissect_core::corpus;
use dissect_core::image::{elf, load_bytes};
use object::elf::SHF_EXECINSTR;
use object::{Object, ObjectSection, ObjectSymbol, SectionFlags, SymbolKind};

#[test]
fn object_crate_sees_the_same_image() {
    for f in corpus::fixtures() {
        let bytes = elf::write(&f.image);
        let file = object::File::parse(&*bytes).unwrap_or_else(|e| panic!("{}: {e}", f.name));
        assert_eq!(file.entry(), f.image.entry_point, "{}", f.name);
        assert_eq!(file.is_64(), f.image.mode.pointer_size() == 8, "{}", f.name);

        for s in &f.image.sections {
            let sec = file
                .section_by_name(&s.name)
                .unwrap_or_else(|| panic!("{}: no section {}", f.name, s.name));
            assert_eq!(sec.address(), s.vaddr, "{} {}", f.name, s.name);
            assert_eq!(sec.size(), s.size, "{} {}", f.name, s.name);
            assert_eq!(sec.data().unwrap(), &s.bytes[..], "{} {}", f.name, s.name);
            let exec = match sec.flags() {
                SectionFlags::Elf { sh_flags, .. } => sh_flags.0 & SHF_EXECINSTR.0 != 0,
                other => panic!("{other:?}"),
            };
            assert_eq!(exec, s.executable, "{} {}", f.name, s.name);
        }

        let mut theirs: Vec<(String, u64, u64, bool)> = file
            .symbols()
            .filter(|s| !s.name().unwrap_or("").is_empty())
            .filter(|s| matches!(s.kind(), SymbolKind::Text | SymbolKind::Data))
            .map(|s| (s.name().unwrap().to_string(), s.address(), s.size(), s.kind() == SymbolKind::Text))
            .collect();
        let mut ours: Vec<(String, u64, u64, bool)> = f
            .image
            .symbols
            .iter()
            .map(|s| (s.name.clone(), s.vaddr, s.size, s.is_function))
            .collect();
        theirs.sort();
        ours.sort();
        assert_eq!(theirs, ours, "{}", f.name);
    }
}

#[test]
fn write_then_load_is_identity() {
    for f in corpus::fixtures() {
        let back = load_bytes(&f.image.path, &elf::write(&f.image)).unwrap();
        assert_eq!(back.sections, f.image.sections, "{}", f.name);
        assert_eq!(back.entry_point, f.image.entry_point);
        assert_eq!(back.mode, f.image.mode);
        let names = |i: &dissect_core::BinaryImage| {
            let mut v: Vec<(String, u64, u64)> = i.symbols.iter().map(|s| (s.name.clone(), s.vaddr, s.size)).collect();
            v.sort();
            v
        };
        assert_eq!(names(&back), names(&f.image), "{}", f.name);
    }
}
