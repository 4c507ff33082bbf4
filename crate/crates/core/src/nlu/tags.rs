//! BIO tagging over entity types: O = 0, B-i = 1 + 2i, I-i = 2 + 2i.

use crate::domain::EntityMention;

pub fn n_tags(n_types: usize) -> usize {
    1 + 2 * n_types
}

pub fn begin(ty: usize) -> usize {
    1 + 2 * ty
}

pub fn inside(ty: usize) -> usize {
    2 + 2 * ty
}

/// Entity type of a B or I tag.
pub fn tag_type(tag: usize) -> Option<usize> {
    (tag > 0).then(|| (tag - 1) / 2)
}

pub fn is_inside(tag: usize) -> bool {
    tag > 0 && tag % 2 == 0
}

/// Whether `to` may follow `from`. An I tag must continue an entity of the
/// same type.
pub fn allowed(from: usize, to: usize) -> bool {
    !is_inside(to) || (from != 0 && tag_type(from) == tag_type(to))
}

pub fn allowed_start(tag: usize) -> bool {
    !is_inside(tag)
}

/// Tags for `len` tokens; mentions of unknown types are skipped.
pub fn encode(mentions: &[EntityMention], len: usize, type_of: impl Fn(&str) -> Option<usize>) -> Vec<usize> {
    let mut tags = vec![0; len];
    for m in mentions {
        let Some(ty) = type_of(&m.entity_type) else { continue };
        if m.start >= m.end || m.end > len {
            continue;
        }
        tags[m.start] = begin(ty);
        for t in tags.iter_mut().take(m.end).skip(m.start + 1) {
            *t = inside(ty);
        }
    }
    tags
}

/// Spans as (start, end, type). A stray I tag opens a new span.
pub fn decode(tags: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (i, &tag) in tags.iter().enumerate() {
        let continues = is_inside(tag) && open.is_some_and(|(_, ty)| Some(ty) == tag_type(tag));
        if continues {
            continue;
        }
        if let Some((s, ty)) = open.take() {
            out.push((s, i, ty));
        }
        if let Some(ty) = tag_type(tag) {
            open = Some((i, ty));
        }
    }
    if let Some((s, ty)) = open {
        out.push((s, tags.len(), ty));
    }
    out
}

pub fn mentions(tokens: &[String], tags: &[usize], types: &[String]) -> Vec<EntityMention> {
    decode(tags).into_iter().map(|(s, e, ty)| EntityMention::from_tokens(tokens, s, e, &types[ty])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::tokenize;
    use proptest::prelude::*;

    #[test]
    fn layout() {
        assert_eq!(n_tags(5), 11);
        assert_eq!((begin(0), inside(0), begin(2), inside(2)), (1, 2, 5, 6));
        assert!(allowed(1, 2) && !allowed(0, 2) && !allowed(3, 2) && allowed(2, 2) && allowed(2, 0));
        assert!(!allowed_start(2) && allowed_start(1));
    }

    #[test]
    fn roundtrip_example() {
        let toks = tokenize("i follow the new york yankees");
        let m = EntityMention::from_tokens(&toks, 3, 6, "sport_team");
        let tags = encode(&[m.clone()], toks.len(), |t| (t == "sport_team").then_some(0));
        assert_eq!(tags, [0, 0, 0, 1, 2, 2]);
        assert_eq!(mentions(&toks, &tags, &["sport_team".into()]), vec![m]);
    }

    proptest! {
        #[test]
        fn well_formed_sequences_roundtrip(spans in proptest::collection::vec((0usize..3, 1usize..4, 0usize..3), 0..4)) {
            let mut tags = Vec::new();
            let mut expect = Vec::new();
            for (gap, len, ty) in spans {
                tags.extend(std::iter::repeat(0).take(gap));
                expect.push((tags.len(), tags.len() + len, ty));
                tags.push(begin(ty));
                tags.extend(std::iter::repeat(inside(ty)).take(len - 1));
            }
            prop_assert_eq!(decode(&tags), expect);
            for w in tags.windows(2) {
                prop_assert!(allowed(w[0], w[1]));
            }
        }
    }
}
