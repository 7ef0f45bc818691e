//! Name rules shared by usernames, organization names and permission names.

pub const MAX_NAME_LEN: usize = 64;

/// `[a-z0-9._-]+`, at most [`MAX_NAME_LEN`] bytes.
pub fn is_slug(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= MAX_NAME_LEN
        && s.bytes().all(|b| {
            b.is_ascii_lowercase() || b.is_ascii_digit() || matches!(b, b'.' | b'_' | b'-')
        })
}

/// Dotted permission name: `[a-z0-9_]+(\.[a-z0-9_]+)*`.
pub fn is_permission_name(s: &str) -> bool {
    !s.is_empty()
        && s.split('.').all(|seg| {
            !seg.is_empty()
                && seg
                    .bytes()
                    .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs() {
        assert!(is_slug("alice"));
        assert!(is_slug("a.b_c-9"));
        assert!(!is_slug("al ice"));
        assert!(!is_slug("Alice"));
        assert!(!is_slug(""));
        assert!(!is_slug(&"a".repeat(65)));
        assert!(is_slug(&"a".repeat(64)));
    }

    #[test]
    fn permission_names() {
        assert!(is_permission_name("config.put"));
        assert!(is_permission_name("org.member.add"));
        assert!(is_permission_name("ns_1"));
        assert!(!is_permission_name("config..put"));
        assert!(!is_permission_name(".config"));
        assert!(!is_permission_name("config.put|x"));
        assert!(!is_permission_name("Config.put"));
        assert!(!is_permission_name("config-put"));
    }
}
