//! Character tokenization and the on-disk token shard format.

use genelm::tokenizer::{decode, encode, TokenShard, SYMBOLS};

fn main() -> genelm::Result<()> {
    let seq = encode("ACGTNacgt")?;
    let names: Vec<&str> = seq.ids.iter().map(|&i| SYMBOLS[i as usize]).collect();
    println!("ids    {:?}", seq.ids);
    println!("tokens {names:?}");
    println!("decode {}", decode(&seq.ids)?);

    let shard = TokenShard::from_windows(&["ACGTACGT", "GGGGCCCC"], 8)?;
    let mut bytes = Vec::new();
    shard.write_to(&mut bytes)?;
    println!("shard header: {}", shard.header_line().trim_end());
    let back = TokenShard::read_from(&bytes[..])?;
    assert_eq!(back, shard);
    println!("round trip ok, {} windows; rewindowed to 4: {}", back.n_windows(), back.rewindow(4)?.n_windows());
    Ok(())
}
