//! Pull parser for OSM history XML.
//!
//! Built on a streaming XML reader: memory stays proportional to the single
//! largest element record (a way's `nd` list or a relation's member list),
//! never to the number of elements in the file.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::{DateTime, Utc};
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;

use super::{Coords, ElementType, HistoryError, Member, Payload, RawVersion, ANONYMOUS_USER_ID};

/// Streams [`RawVersion`] records out of OSM history XML.
///
/// Tags are read and discarded. Unknown elements are skipped. Attribute and
/// schema violations surface as [`HistoryError::MalformedInput`] or
/// [`HistoryError::MissingAttribute`] with the byte offset of the record.
pub struct HistoryReader<R: BufRead> {
    reader: Reader<R>,
    buf: Vec<u8>,
    done: bool,
}

/// Parse a history stream; alias for [`HistoryReader::from_reader`].
pub fn parse_history<R: BufRead>(input: R) -> HistoryReader<R> {
    HistoryReader::from_reader(input)
}

impl HistoryReader<BufReader<File>> {
    pub fn from_path<P: AsRef<Path>>(path: P) -> Result<Self, HistoryError> {
        let file = File::open(path)?;
        Ok(Self::from_reader(BufReader::new(file)))
    }
}

impl<R: BufRead> HistoryReader<R> {
    pub fn from_reader(input: R) -> Self {
        let mut reader = Reader::from_reader(input);
        // Whitespace between records is irrelevant; trimming lets us treat
        // any non-empty text as unexpected content.
        reader.config_mut().trim_text(true);
        HistoryReader {
            reader,
            buf: Vec::with_capacity(4096),
            done: false,
        }
    }

    fn position(&self) -> u64 {
        self.reader.buffer_position() as u64
    }

    fn malformed(&self, reason: impl Into<String>) -> HistoryError {
        HistoryError::MalformedInput {
            position: self.position(),
            reason: reason.into(),
        }
    }

    fn missing(&self, attribute: &'static str) -> HistoryError {
        HistoryError::MissingAttribute {
            position: self.position(),
            attribute,
        }
    }

    fn next_version(&mut self) -> Result<Option<RawVersion>, HistoryError> {
        loop {
            self.buf.clear();
            let event = self
                .reader
                .read_event_into(&mut self.buf)
                .map_err(|e| self.xml_error(e))?;
            match event {
                Event::Start(start) => {
                    let start = start.to_owned();
                    match element_type_of(start.name().as_ref()) {
                        Some(kind) => return self.read_record(kind, &start, false).map(Some),
                        // The <osm> wrapper: descend into it. Anything else
                        // (e.g. <bound>) is skipped wholesale.
                        None if start.name().as_ref() == b"osm" => continue,
                        None => self.skip_element(start.name().as_ref().to_vec())?,
                    }
                }
                Event::Empty(start) => {
                    let start = start.to_owned();
                    if let Some(kind) = element_type_of(start.name().as_ref()) {
                        return self.read_record(kind, &start, true).map(Some);
                    }
                }
                Event::Text(t) => {
                    if !t.is_empty() {
                        return Err(self.malformed("unexpected text content"));
                    }
                }
                Event::Eof => return Ok(None),
                _ => {}
            }
        }
    }

    fn read_record(
        &mut self,
        kind: ElementType,
        start: &BytesStart<'_>,
        is_empty: bool,
    ) -> Result<RawVersion, HistoryError> {
        let attrs = self.record_attributes(start)?;
        let payload = if is_empty {
            match kind {
                ElementType::Node => Payload::Node {
                    coords: self.node_coords(&attrs)?,
                },
                ElementType::Way => Payload::Way { node_refs: Vec::new() },
                ElementType::Relation => Payload::Relation { members: Vec::new() },
            }
        } else {
            self.read_children(kind, &attrs)?
        };
        Ok(RawVersion {
            element_type: kind,
            element_id: attrs.id,
            version: attrs.version,
            timestamp: attrs.timestamp,
            user_id: attrs.user_id,
            visible: attrs.visible,
            payload,
        })
    }

    /// Reads child records (`nd`, `member`, `tag`) up to the closing tag.
    fn read_children(
        &mut self,
        kind: ElementType,
        attrs: &RecordAttributes,
    ) -> Result<Payload, HistoryError> {
        let mut node_refs: Vec<u64> = Vec::new();
        let mut members: Vec<Member> = Vec::new();
        let mut child_buf = Vec::new();
        loop {
            child_buf.clear();
            let event = self
                .reader
                .read_event_into(&mut child_buf)
                .map_err(|e| self.xml_error(e))?;
            match event {
                Event::Empty(child) => {
                    self.read_child(kind, &child, &mut node_refs, &mut members)?;
                }
                Event::Start(child) => {
                    let child = child.to_owned();
                    self.read_child(kind, &child, &mut node_refs, &mut members)?;
                    self.skip_element(child.name().as_ref().to_vec())?;
                }
                Event::End(end) => {
                    if end.name().as_ref() == kind.as_str().as_bytes() {
                        break;
                    }
                    return Err(self.malformed("mismatched closing tag"));
                }
                Event::Text(t) => {
                    if !t.is_empty() {
                        return Err(self.malformed("unexpected text inside element record"));
                    }
                }
                Event::Eof => {
                    return Err(self.malformed(format!("end of file inside {} {}", kind, attrs.id)))
                }
                _ => {}
            }
        }
        Ok(match kind {
            ElementType::Node => Payload::Node {
                coords: self.node_coords(attrs)?,
            },
            ElementType::Way => Payload::Way { node_refs },
            ElementType::Relation => Payload::Relation { members },
        })
    }

    fn read_child(
        &self,
        kind: ElementType,
        child: &BytesStart<'_>,
        node_refs: &mut Vec<u64>,
        members: &mut Vec<Member>,
    ) -> Result<(), HistoryError> {
        match child.name().as_ref() {
            b"nd" => {
                if kind != ElementType::Way {
                    return Err(self.malformed(format!("`nd` child inside a {kind} record")));
                }
                node_refs.push(self.required_ref(child)?);
            }
            b"member" => {
                if kind != ElementType::Relation {
                    return Err(self.malformed(format!("`member` child inside a {kind} record")));
                }
                members.push(self.read_member(child)?);
            }
            // Tag content analysis is out of scope; consume and drop.
            b"tag" => {}
            _ => {}
        }
        Ok(())
    }

    /// Skips a subtree we do not model, tracking nesting of same-named tags.
    fn skip_element(&mut self, name: Vec<u8>) -> Result<(), HistoryError> {
        let mut depth = 1usize;
        let mut buf = Vec::new();
        while depth > 0 {
            buf.clear();
            match self
                .reader
                .read_event_into(&mut buf)
                .map_err(|e| self.xml_error(e))?
            {
                Event::Start(s) if s.name().as_ref() == name.as_slice() => depth += 1,
                Event::End(e) if e.name().as_ref() == name.as_slice() => depth -= 1,
                Event::Eof => return Err(self.malformed("end of file inside skipped element")),
                _ => {}
            }
        }
        Ok(())
    }

    fn record_attributes(&self, start: &BytesStart<'_>) -> Result<RecordAttributes, HistoryError> {
        let mut id = None;
        let mut version = None;
        let mut timestamp = None;
        let mut user_id = ANONYMOUS_USER_ID;
        let mut visible = true;
        let mut lat = None;
        let mut lon = None;
        for attr in start.attributes() {
            let attr = attr.map_err(|e| self.malformed(format!("bad attribute: {e}")))?;
            let value = attr
                .unescape_value()
                .map_err(|e| self.malformed(format!("bad attribute value: {e}")))?;
            match attr.key.as_ref() {
                b"id" => id = Some(self.parse_int(&value, "id")?),
                b"version" => version = Some(self.parse_int(&value, "version")? as u32),
                b"timestamp" => timestamp = Some(self.parse_timestamp(&value)?),
                b"uid" => user_id = self.parse_int(&value, "uid")?,
                b"visible" => {
                    visible = match value.as_ref() {
                        "true" => true,
                        "false" => false,
                        other => {
                            return Err(self.malformed(format!(
                                "attribute `visible` must be true or false, got `{other}`"
                            )))
                        }
                    }
                }
                b"lat" => lat = Some(self.parse_coord(&value, "lat", 90.0)?),
                b"lon" => lon = Some(self.parse_coord(&value, "lon", 180.0)?),
                // user name, changeset, … — present in dumps, not modeled.
                _ => {}
            }
        }
        let id = id.ok_or_else(|| self.missing("id"))?;
        let version = version.ok_or_else(|| self.missing("version"))?;
        let timestamp = timestamp.ok_or_else(|| self.missing("timestamp"))?;
        if id == 0 {
            return Err(self.malformed("element id must be >= 1"));
        }
        if version == 0 {
            return Err(self.malformed("version must be >= 1"));
        }
        Ok(RecordAttributes {
            id,
            version,
            timestamp,
            user_id,
            visible,
            lat,
            lon,
        })
    }

    fn node_coords(&self, attrs: &RecordAttributes) -> Result<Option<Coords>, HistoryError> {
        match (attrs.lat, attrs.lon) {
            (Some(lat), Some(lon)) => Ok(Some(Coords { lat, lon })),
            (None, None) if !attrs.visible => Ok(None),
            (None, _) => Err(self.missing("lat")),
            (_, None) => Err(self.missing("lon")),
        }
    }

    fn read_member(&self, child: &BytesStart<'_>) -> Result<Member, HistoryError> {
        let mut member_type = None;
        let mut member_id = None;
        for attr in child.attributes() {
            let attr = attr.map_err(|e| self.malformed(format!("bad attribute: {e}")))?;
            let value = attr
                .unescape_value()
                .map_err(|e| self.malformed(format!("bad attribute value: {e}")))?;
            match attr.key.as_ref() {
                b"type" => {
                    member_type = Some(
                        value
                            .parse::<ElementType>()
                            .map_err(|_| self.malformed(format!("unknown member type `{value}`")))?,
                    )
                }
                b"ref" => member_id = Some(self.parse_int(&value, "ref")?),
                b"role" => {} // roles carry no information we use
                _ => {}
            }
        }
        let member_type = member_type.ok_or_else(|| self.missing("type"))?;
        let member_id = member_id.ok_or_else(|| self.missing("ref"))?;
        Ok(Member {
            member_type,
            member_id,
        })
    }

    fn required_ref(&self, start: &BytesStart<'_>) -> Result<u64, HistoryError> {
        for attr in start.attributes() {
            let attr = attr.map_err(|e| self.malformed(format!("bad attribute: {e}")))?;
            if attr.key.as_ref() == b"ref" {
                let value = attr
                    .unescape_value()
                    .map_err(|e| self.malformed(format!("bad attribute value: {e}")))?;
                return self.parse_int(&value, "ref");
            }
        }
        Err(self.missing("ref"))
    }

    fn parse_int(&self, value: &str, name: &str) -> Result<u64, HistoryError> {
        value.parse().map_err(|_| {
            self.malformed(format!(
                "attribute `{name}` is not an unsigned integer: `{value}`"
            ))
        })
    }

    fn parse_coord(&self, value: &str, name: &str, bound: f64) -> Result<f64, HistoryError> {
        let parsed: f64 = value
            .parse()
            .map_err(|_| self.malformed(format!("attribute `{name}` is not a number: `{value}`")))?;
        if !parsed.is_finite() || parsed < -bound || parsed > bound {
            return Err(self.malformed(format!(
                "attribute `{name}` out of range [-{bound}, {bound}]: {parsed}"
            )));
        }
        Ok(parsed)
    }

    fn parse_timestamp(&self, value: &str) -> Result<DateTime<Utc>, HistoryError> {
        DateTime::parse_from_rfc3339(value)
            .map(|dt| dt.with_timezone(&Utc))
            .map_err(|e| self.malformed(format!("bad timestamp `{value}`: {e}")))
    }

    fn xml_error(&self, error: quick_xml::Error) -> HistoryError {
        match error {
            quick_xml::Error::Io(e) => {
                HistoryError::Io(std::io::Error::new(e.kind(), e.to_string()))
            }
            other => HistoryError::MalformedInput {
                position: self.position(),
                reason: other.to_string(),
            },
        }
    }
}

struct RecordAttributes {
    id: u64,
    version: u32,
    timestamp: DateTime<Utc>,
    user_id: u64,
    visible: bool,
    lat: Option<f64>,
    lon: Option<f64>,
}

fn element_type_of(name: &[u8]) -> Option<ElementType> {
    match name {
        b"node" => Some(ElementType::Node),
        b"way" => Some(ElementType::Way),
        b"relation" => Some(ElementType::Relation),
        _ => None,
    }
}

impl<R: BufRead> Iterator for HistoryReader<R> {
    type Item = Result<RawVersion, HistoryError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_version() {
            Ok(Some(v)) => Some(Ok(v)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn parse_all(xml: &str) -> Result<Vec<RawVersion>, HistoryError> {
        parse_history(Cursor::new(xml.as_bytes())).collect()
    }

    #[test]
    fn node_record_with_all_attributes() {
        let xml = r#"<?xml version="1.0" encoding="UTF-8"?>
<osm version="0.6">
 <node id="101" version="2" timestamp="2008-03-01T12:30:45Z" uid="7" visible="true" lat="10.5" lon="20.25"/>
</osm>"#;
        let records = parse_all(xml).unwrap();
        assert_eq!(records.len(), 1);
        let v = &records[0];
        assert_eq!(v.element_type, ElementType::Node);
        assert_eq!(v.element_id, 101);
        assert_eq!(v.version, 2);
        assert_eq!(v.user_id, 7);
        assert!(v.visible);
        assert_eq!(v.coords(), Some(Coords { lat: 10.5, lon: 20.25 }));
        assert_eq!(
            v.timestamp,
            DateTime::parse_from_rfc3339("2008-03-01T12:30:45Z").unwrap()
        );
    }

    #[test]
    fn node_without_uid_is_anonymous() {
        let xml = r#"<osm><node id="1" version="1" timestamp="2006-01-01T00:00:00Z" lat="0.5" lon="0.5"/></osm>"#;
        let records = parse_all(xml).unwrap();
        assert_eq!(records[0].user_id, ANONYMOUS_USER_ID);
        assert!(records[0].is_anonymous());
    }

    #[test]
    fn way_preserves_duplicate_refs() {
        let xml = r#"<osm>
 <way id="3" version="1" timestamp="2009-06-01T00:00:00Z" uid="5">
  <nd ref="5"/><nd ref="6"/><nd ref="5"/>
  <tag k="highway" v="residential"/>
 </way>
</osm>"#;
        let records = parse_all(xml).unwrap();
        match &records[0].payload {
            Payload::Way { node_refs } => assert_eq!(node_refs, &vec![5, 6, 5]),
            other => panic!("expected way payload, got {other:?}"),
        }
    }

    #[test]
    fn relation_members_keep_order_and_type() {
        let xml = r#"<osm>
 <relation id="9" version="4" timestamp="2010-01-01T00:00:00Z" uid="2">
  <member type="node" ref="101" role="stop"/>
  <member type="way" ref="3" role=""/>
  <member type="relation" ref="8"/>
 </relation>
</osm>"#;
        let records = parse_all(xml).unwrap();
        match &records[0].payload {
            Payload::Relation { members } => {
                assert_eq!(
                    members,
                    &vec![
                        Member { member_type: ElementType::Node, member_id: 101 },
                        Member { member_type: ElementType::Way, member_id: 3 },
                        Member { member_type: ElementType::Relation, member_id: 8 },
                    ]
                );
            }
            other => panic!("expected relation payload, got {other:?}"),
        }
    }

    #[test]
    fn deleted_node_has_no_coords() {
        let xml = r#"<osm><node id="4" version="2" timestamp="2011-05-05T00:00:00Z" uid="1" visible="false"/></osm>"#;
        let records = parse_all(xml).unwrap();
        assert!(!records[0].visible);
        assert_eq!(records[0].coords(), None);
    }

    #[test]
    fn visible_node_without_coords_is_missing_attribute() {
        let xml = r#"<osm><node id="4" version="1" timestamp="2011-05-05T00:00:00Z" uid="1"/></osm>"#;
        let err = parse_all(xml).unwrap_err();
        assert!(matches!(
            err,
            HistoryError::MissingAttribute { attribute: "lat", .. }
        ));
    }

    #[test]
    fn missing_required_attributes_are_reported() {
        for (xml, attr) in [
            (r#"<osm><node version="1" timestamp="2011-05-05T00:00:00Z" lat="0" lon="0"/></osm>"#, "id"),
            (r#"<osm><node id="1" timestamp="2011-05-05T00:00:00Z" lat="0" lon="0"/></osm>"#, "version"),
            (r#"<osm><node id="1" version="1" lat="0" lon="0"/></osm>"#, "timestamp"),
        ] {
            let err = parse_all(xml).unwrap_err();
            match err {
                HistoryError::MissingAttribute { attribute, .. } => assert_eq!(attribute, attr),
                other => panic!("expected MissingAttribute({attr}), got {other:?}"),
            }
        }
    }

    #[test]
    fn out_of_range_coordinates_rejected() {
        let xml = r#"<osm><node id="1" version="1" timestamp="2011-05-05T00:00:00Z" lat="91.0" lon="0"/></osm>"#;
        assert!(matches!(
            parse_all(xml).unwrap_err(),
            HistoryError::MalformedInput { .. }
        ));
    }

    #[test]
    fn broken_xml_is_malformed_input() {
        let xml = r#"<osm><node id="1" version="1" timestamp="2011-05-05T00:00:00Z" lat="0" lon="0"></osm>"#;
        assert!(matches!(
            parse_all(xml).unwrap_err(),
            HistoryError::MalformedInput { .. }
        ));
    }

    #[test]
    fn tags_and_unknown_elements_are_skipped() {
        let xml = r#"<osm>
 <bound box="-90,-180,90,180"/>
 <changeset id="77"><tag k="comment" v="x"/></changeset>
 <node id="1" version="1" timestamp="2011-05-05T00:00:00Z" lat="0" lon="0">
  <tag k="name" v="a &amp; b"/>
 </node>
</osm>"#;
        let records = parse_all(xml).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].element_id, 1);
    }

    #[test]
    fn zero_id_or_version_rejected() {
        let bad_id = r#"<osm><node id="0" version="1" timestamp="2011-05-05T00:00:00Z" lat="0" lon="0"/></osm>"#;
        let bad_version = r#"<osm><node id="1" version="0" timestamp="2011-05-05T00:00:00Z" lat="0" lon="0"/></osm>"#;
        assert!(parse_all(bad_id).is_err());
        assert!(parse_all(bad_version).is_err());
    }
}
