use ivf_core::config::{Layer, KEYS};

/// Pulls `--key value` / `--key=value` pairs naming configuration keys out
/// of `argv`, returning the remaining arguments and the overrides.
pub fn split(argv: &[String]) -> Result<(Vec<String>, Layer), String> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut layer = Vec::new();
    let mut it = argv.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg.clone());
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        let key = name.replace('-', "_");
        if !KEYS.contains(&key.as_str()) {
            rest.push(arg.clone());
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .cloned()
                .ok_or_else(|| format!("`--{name}` needs a value"))?,
        };
        layer.push((key, value));
    }
    Ok((rest, layer))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn config_flags_are_separated() {
        let (rest, layer) = split(&s(&["ivf", "train-av", "--steps-a", "10", "--data", "x", "--seed=3"])).unwrap();
        assert_eq!(rest, s(&["ivf", "train-av", "--data", "x"]));
        assert_eq!(
            layer,
            vec![("steps_a".into(), "10".into()), ("seed".into(), "3".into())]
        );
    }

    #[test]
    fn missing_value_is_an_error() {
        assert!(split(&s(&["ivf", "eval", "--seed"])).is_err());
    }
}
