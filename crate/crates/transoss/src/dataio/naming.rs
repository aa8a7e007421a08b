//! Item filename grammar: `OID_sSID_cCID_{opt|sar}.EXT`.
//!
//! `OID` is a zero-padded 4-digit object id or the literal `-1` for
//! distractors, `SID` a 2-digit sequence id, `CID` a camera id. The
//! extension is not interpreted here.

use crate::error::{Error, Result};
use crate::model::ModalityTag;

fn parse_err(name: &str, position: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        what: format!("item name '{name}'"),
        position,
        message: message.into(),
    }
}

/// Parses a file name (or path; only the final component is read) into
/// `(object_id, sequence_id, camera_id, modality)`.
pub fn parse_item_name(name: &str) -> Result<(i64, u32, u32, ModalityTag)> {
    let base = name.rsplit(['/', '\\']).next().unwrap_or(name);
    let stem = match base.rfind('.') {
        Some(dot) => &base[..dot],
        None => base,
    };
    let offset_of = |part: &str| -> usize {
        // byte offset of the field within the original string
        let within = part.as_ptr() as usize - base.as_ptr() as usize;
        within + (name.len() - base.len())
    };
    let parts: Vec<&str> = stem.split('_').collect();
    if parts.len() != 4 {
        return Err(parse_err(
            name,
            0,
            format!("expected 4 underscore-separated fields, found {}", parts.len()),
        ));
    }
    let object_id: i64 = parts[0]
        .parse()
        .map_err(|_| parse_err(name, offset_of(parts[0]), "object id is not an integer"))?;
    if object_id < -1 {
        return Err(parse_err(
            name,
            offset_of(parts[0]),
            "object id must be >= 0 or the distractor marker -1",
        ));
    }
    let seq = parts[1]
        .strip_prefix('s')
        .ok_or_else(|| parse_err(name, offset_of(parts[1]), "sequence field must start with 's'"))?;
    let sequence_id: u32 = seq
        .parse()
        .map_err(|_| parse_err(name, offset_of(parts[1]) + 1, "sequence id is not an integer"))?;
    let cam = parts[2]
        .strip_prefix('c')
        .ok_or_else(|| parse_err(name, offset_of(parts[2]), "camera field must start with 'c'"))?;
    let camera_id: u32 = cam
        .parse()
        .map_err(|_| parse_err(name, offset_of(parts[2]) + 1, "camera id is not an integer"))?;
    let modality = ModalityTag::parse(parts[3]).ok_or_else(|| {
        parse_err(
            name,
            offset_of(parts[3]),
            format!("unknown modality '{}' (expected opt or sar)", parts[3]),
        )
    })?;
    Ok((object_id, sequence_id, camera_id, modality))
}

/// Formats descriptor fields into a file name with the given extension.
pub fn format_item_name(
    object_id: i64,
    sequence_id: u32,
    camera_id: u32,
    modality: ModalityTag,
    ext: &str,
) -> String {
    let oid = if object_id == -1 {
        "-1".to_string()
    } else {
        format!("{object_id:04}")
    };
    format!(
        "{oid}_s{sequence_id:02}_c{camera_id}_{}.{ext}",
        modality.as_str()
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grammar_examples() {
        assert_eq!(
            parse_item_name("0012_s03_c2_opt.tif").unwrap(),
            (12, 3, 2, ModalityTag::Optical)
        );
        assert_eq!(
            parse_item_name("-1_s07_c1_sar.tif").unwrap(),
            (-1, 7, 1, ModalityTag::Sar)
        );
        assert!(parse_item_name("0012_s03_c2_xyz.tif").is_err());
    }

    #[test]
    fn path_prefix_and_missing_extension_are_tolerated() {
        assert_eq!(
            parse_item_name("data/images/0099_s12_c4_sar.sarf").unwrap(),
            (99, 12, 4, ModalityTag::Sar)
        );
        assert_eq!(
            parse_item_name("0001_s00_c1_opt").unwrap(),
            (1, 0, 1, ModalityTag::Optical)
        );
    }

    #[test]
    fn malformed_names_report_position() {
        let err = parse_item_name("0012_x03_c2_opt.png").unwrap_err();
        match err {
            crate::Error::Parse { position, .. } => assert_eq!(position, 5),
            other => panic!("unexpected error {other:?}"),
        }
        assert!(parse_item_name("0012_s03_c2.png").is_err());
        assert!(parse_item_name("abcd_s03_c2_opt.png").is_err());
        assert!(parse_item_name("-2_s03_c2_opt.png").is_err());
    }

    #[test]
    fn format_examples() {
        assert_eq!(
            format_item_name(12, 3, 2, ModalityTag::Optical, "png"),
            "0012_s03_c2_opt.png"
        );
        assert_eq!(
            format_item_name(-1, 7, 1, ModalityTag::Sar, "sarf"),
            "-1_s07_c1_sar.sarf"
        );
    }

    proptest! {
        #[test]
        fn parse_format_round_trip(
            oid in prop_oneof![Just(-1i64), (0i64..100000)],
            sid in 0u32..1000,
            cid in 0u32..100,
            sar in any::<bool>(),
        ) {
            let m = if sar { ModalityTag::Sar } else { ModalityTag::Optical };
            let name = format_item_name(oid, sid, cid, m, "png");
            let (o, s, c, mm) = parse_item_name(&name).unwrap();
            prop_assert_eq!((o, s, c, mm), (oid, sid, cid, m));
        }
    }
}
