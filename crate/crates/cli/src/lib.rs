//! Command-line front end for the binlow training engine: config parsing,
//! dataset ingestion and the experiment commands.

pub mod commands;
pub mod config;
pub mod data;

/// Exit codes: 0 ok, 2 input error, 3 numeric failure.
pub fn exit_code_of(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<binlow_core::Error>() {
            if matches!(core, binlow_core::Error::NumericFailure { .. }) {
                return 3;
            }
        }
    }
    2
}

#[cfg(test)]
mod tests {
    #[test]
    fn numeric_failures_map_to_exit_3() {
        let e = anyhow::Error::from(binlow_core::Error::NumericFailure {
            layer: 2,
            phase: "forward".into(),
        });
        assert_eq!(super::exit_code_of(&e), 3);
        let io = anyhow::Error::from(std::io::Error::new(std::io::ErrorKind::NotFound, "x"));
        assert_eq!(super::exit_code_of(&io), 2);
    }
}
