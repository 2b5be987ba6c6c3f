use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;

use crate::error::{Error, Result};

/// One FASTA entry. The sequence is uppercased and contains no line breaks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FastaRecord {
    pub header: String,
    pub sequence: String,
}

impl FastaRecord {
    pub fn new(header: impl Into<String>, sequence: impl Into<String>) -> Self {
        FastaRecord {
            header: header.into(),
            sequence: sequence.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }
}

/// Parses a FASTA stream. Wrapped sequence lines are joined and soft-masked
/// (lowercase) bases are uppercased. Records come back in file order.
pub fn parse_fasta<R: BufRead>(reader: R) -> Result<Vec<FastaRecord>> {
    let mut records: Vec<FastaRecord> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim_end();
        if let Some(header) = line.strip_prefix('>') {
            let header = header.trim();
            if header.is_empty() {
                return Err(Error::MalformedInput {
                    line: line_no,
                    message: "empty record header".into(),
                });
            }
            records.push(FastaRecord::new(header, String::new()));
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let Some(current) = records.last_mut() else {
            return Err(Error::MalformedInput {
                line: line_no,
                message: "sequence data before the first '>' header".into(),
            });
        };
        if let Some((col, ch)) = line
            .char_indices()
            .find(|(_, c)| !c.is_ascii_alphabetic())
        {
            return Err(Error::MalformedInput {
                line: line_no,
                message: format!("invalid character {ch:?} at column {}", col + 1),
            });
        }
        current.sequence.push_str(&line.to_ascii_uppercase());
    }
    Ok(records)
}

/// Opens a FASTA file, transparently decompressing gzip input.
pub fn read_fasta_file(path: impl AsRef<Path>) -> Result<Vec<FastaRecord>> {
    let mut file = File::open(path.as_ref())?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic)?;
    let file = File::open(path.as_ref())?;
    if n == 2 && magic == [0x1f, 0x8b] {
        parse_fasta(BufReader::new(MultiGzDecoder::new(file)))
    } else {
        parse_fasta(BufReader::new(file))
    }
}

/// Writes records with sequence lines wrapped at `line_width` characters.
pub fn write_fasta<W: Write>(mut out: W, records: &[FastaRecord], line_width: usize) -> Result<()> {
    let width = line_width.max(1);
    for rec in records {
        writeln!(out, ">{}", rec.header)?;
        for chunk in rec.sequence.as_bytes().chunks(width) {
            out.write_all(chunk)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}
