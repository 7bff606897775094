use std::collections::BTreeSet;

use url::Url;

use super::DocumentRecord;

/// Output of [`filter_leakage`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LeakageReport {
    pub kept: Vec<DocumentRecord>,
    pub removed: usize,
    pub warnings: Vec<String>,
}

/// Registrable domain (eTLD+1) of a host name, lowercased. Falls back to the
/// host itself when the public suffix list has no answer (IP literals,
/// single-label hosts).
pub fn registrable_domain(host: &str) -> String {
    let host = host.trim().trim_end_matches('.').to_ascii_lowercase();
    psl::domain_str(&host).map(str::to_string).unwrap_or(host)
}

/// Drops records whose URL points into a blocked domain.
///
/// Blocked entries are normalised to registrable domains, so blocking
/// `foxnews.com` also removes `video.foxnews.com`. Records without a URL are
/// kept; records with an unparsable URL are kept and reported in `warnings`.
pub fn filter_leakage(records: &[DocumentRecord], blocked_domains: &BTreeSet<String>) -> LeakageReport {
    let blocked: BTreeSet<String> = blocked_domains.iter().map(|d| registrable_domain(d)).collect();
    let mut report = LeakageReport::default();
    for rec in records {
        let Some(raw) = rec.url.as_deref() else {
            report.kept.push(rec.clone());
            continue;
        };
        let host = Url::parse(raw).ok().and_then(|u| u.host_str().map(str::to_string));
        match host {
            Some(host) => {
                if blocked.contains(&registrable_domain(&host)) {
                    report.removed += 1;
                } else {
                    report.kept.push(rec.clone());
                }
            }
            None => {
                report.warnings.push(format!("record {}: malformed url {raw:?}, kept", rec.id));
                report.kept.push(rec.clone());
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::IdeologyLabel;

    fn rec(id: &str, url: Option<&str>) -> DocumentRecord {
        DocumentRecord {
            id: id.into(),
            text: String::new(),
            caption: None,
            image: None,
            image_path: None,
            source: "reddit".into(),
            label: IdeologyLabel::Right,
            story_id: None,
            face_boxes: vec![],
            url: url.map(str::to_string),
        }
    }

    fn ids(r: &LeakageReport) -> Vec<&str> {
        r.kept.iter().map(|r| r.id.as_str()).collect()
    }

    #[test]
    fn removes_blocked_domains_and_subdomains() {
        let blocked: BTreeSet<String> = ["foxnews.com".to_string(), "www.bbc.co.uk".to_string()].into();
        let recs = vec![
            rec("a", Some("https://foxnews.com/politics/x")),
            rec("b", Some("https://video.foxnews.com/v/1")),
            rec("c", Some("https://news.bbc.co.uk/story")),
            rec("d", Some("https://example.org/foxnews.com")),
            rec("e", None),
        ];
        let out = filter_leakage(&recs, &blocked);
        assert_eq!(ids(&out), ["d", "e"]);
        assert_eq!(out.removed, 3);
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn empty_blocklist_is_identity() {
        let recs = vec![rec("a", Some("https://foxnews.com/x")), rec("b", None)];
        let out = filter_leakage(&recs, &BTreeSet::new());
        assert_eq!(out.kept, recs);
    }

    #[test]
    fn malformed_urls_are_kept_with_warning() {
        let blocked: BTreeSet<String> = ["foxnews.com".to_string()].into();
        let out = filter_leakage(&[rec("a", Some("not a url")), rec("b", Some("https://cnn.com/"))], &blocked);
        assert_eq!(ids(&out), ["a", "b"]);
        assert_eq!(out.warnings.len(), 1);
        assert!(out.warnings[0].contains("record a"));
    }

    #[test]
    fn registrable_domain_handles_multi_label_suffixes() {
        assert_eq!(registrable_domain("www.bbc.co.uk"), "bbc.co.uk");
        assert_eq!(registrable_domain("Video.FoxNews.com."), "foxnews.com");
    }
}
