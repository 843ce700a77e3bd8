use clap::Parser;
use collage_forge::api::{router, AppState};
use collage_forge::cli::{self, Cli, Command};
use tracing_subscriber::EnvFilter;

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Run(args) => {
            let out = cli::run(&args)?;
            println!("final: {}", out.final_png.display());
            for path in [out.export, out.trace, out.checkpoint].into_iter().flatten() {
                println!("wrote: {}", path.display());
            }
            if let Some(loss) = out.best_loss {
                println!("best loss: {loss}");
            }
        }
        Command::Serve(args) => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let app = router(AppState::new(args.multi_session));
                let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port)).await?;
                tracing::info!("listening on {}", listener.local_addr()?);
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await
            })?;
        }
    }
    Ok(())
}
