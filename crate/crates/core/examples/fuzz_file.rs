//! Every perturbation kind applied to one file. A minimal PE image shows
//! which bytes bit substitution leaves alone.

use akash::perturb::{apply_edit, hamming_distance, protected_regions_pe, PerturbSpec};
use akash::synth::synth_file;

fn main() -> akash::Result<()> {
    let mut f = synth_file(8192, 5);
    // MZ stub pointing at a PE32 header at 0x80 with two sections and
    // 0x200 bytes of headers.
    f[..0x200].fill(0);
    f[..2].copy_from_slice(b"MZ");
    f[0x3c..0x40].copy_from_slice(&0x80u32.to_le_bytes());
    f[0x80..0x84].copy_from_slice(b"PE\0\0");
    f[0x86..0x88].copy_from_slice(&2u16.to_le_bytes());
    f[0x94..0x96].copy_from_slice(&224u16.to_le_bytes());
    f[0x98..0x9a].copy_from_slice(&0x10bu16.to_le_bytes());
    f[0xd4..0xd8].copy_from_slice(&0x200u32.to_le_bytes());
    let mut plain = f.clone();
    plain[0] = 0;
    println!("PE image protects {:?}", protected_regions_pe(&f).ranges());
    println!("other files protect {:?}", protected_regions_pe(&plain).ranges());

    for text in ["bitsub:rho=64", "insert:off=100,len=32", "delete:off=4000,len=80", "overlay:len=256", "truncate:len=256"] {
        let spec = PerturbSpec::parse(text, 9)?;
        let m = apply_edit(&f, &spec)?;
        let bits = if m.len() == f.len() { hamming_distance(&f, &m).to_string() } else { "-".into() };
        println!("{spec:<28} len {:5} -> {:5}  bits {bits}", f.len(), m.len());
    }
    Ok(())
}
