//! The hashing text encoder and the external embedding file.

use kgcm::text::{encode_hashed, fnv1a64, load_embedding_file, tokenize, TextEncoder, TextRecord};

fn main() -> kgcm::Result<()> {
    println!("tokens,{:?}", tokenize("Rush-hour DEMAND!"));
    println!("fnv1a(a),{:#018x}", fnv1a64(b"a"));

    let e = encode_hashed("large concert near region r0", 8)?;
    println!("num_tokens,{}", e.num_tokens());
    println!("pooled,{:?}", e.pooled());
    let swapped = encode_hashed("region r0 near concert large", 8)?;
    println!("order_invariant,{}", e.pooled() == swapped.pooled());

    // precomputed vectors, e.g. from a sentence encoder run elsewhere
    let dir = tempdir();
    let path = dir.join("embeddings.csv");
    std::fs::write(&path, "r0_t5,0.6,0.8,0,0\nglobal_t5,0,0,1,0\n").expect("write temp file");
    let encoder = TextEncoder::from_table(4, load_embedding_file(&path)?)?;
    let v = encoder.encode(&TextRecord::new("r0_t5", "ignored in file mode"))?;
    println!("file_vector,{:?}", v.pooled());
    println!("missing,{}", encoder.encode(&TextRecord::new("r9_t0", "no vector for this id")).unwrap_err());
    Ok(())
}

fn tempdir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("kgcm-text-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("create temp dir");
    dir
}
