use idmac_cli::{execute, Cli, Parser};

fn main() -> anyhow::Result<()> {
    execute(Cli::parse())
}
