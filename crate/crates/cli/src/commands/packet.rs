//! Binary packet tooling: produce a sample packet from the configuration,
//! inspect an encoded file, or decode one to JSON.

use std::path::PathBuf;

use clap::Subcommand;
use collabedit_core::collab::{client_get_delta_and_kkt, LayerStack};
use collabedit_core::config::RunConfig;
use collabedit_core::knowledge::sample_edit_requests;
use collabedit_core::wire::{decode_packet, encode_packet};

use crate::output::CommandOutput;

#[derive(Subcommand)]
pub enum PacketAction {
    /// Compute one client's packet from the configuration and write it
    Encode {
        /// Output file; defaults to <out-dir>/packet/sample.cedp
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Decode a packet file and print its layout
    Inspect {
        #[arg(long)]
        file: PathBuf,
    },
    /// Decode a packet file to JSON
    Decode {
        #[arg(long)]
        file: PathBuf,
        /// JSON output path; defaults to <out-dir>/packet/packet.json
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

pub fn run(cfg: &RunConfig, action: &PacketAction, out: &CommandOutput) -> anyhow::Result<()> {
    match action {
        PacketAction::Encode { file } => {
            let universe = cfg.universe();
            let (stack, _) = cfg.build_stack(&universe)?;
            let layer = stack.layers[cfg.edit_range[0]].clone();
            let requests = sample_edit_requests(
                &universe,
                cfg.edits_per_client,
                1,
                cfg.seed,
                &layer.base_facts,
            )?;
            let packet = client_get_delta_and_kkt(
                &universe,
                &LayerStack::single(layer.clone()),
                0,
                0,
                &requests,
                &[layer.c0.clone()],
            )?;
            let bytes = encode_packet(&packet);
            let path = file
                .clone()
                .unwrap_or_else(|| out.dir().join("sample.cedp"));
            std::fs::write(&path, &bytes)?;
            write_layout(cfg, out, &packet, bytes.len(), &path)?;
            println!("wrote {} bytes to {}", bytes.len(), path.display());
        }
        PacketAction::Inspect { file } => {
            let bytes = std::fs::read(file)?;
            let packet = decode_packet(&bytes)?;
            write_layout(cfg, out, &packet, bytes.len(), file)?;
            println!(
                "client {} round {} with {} layer entr{}",
                packet.client_id,
                packet.round,
                packet.entries.len(),
                if packet.entries.len() == 1 { "y" } else { "ies" }
            );
            for e in &packet.entries {
                println!(
                    "  layer {}: delta {}x{}, gram {}x{}",
                    e.layer_id,
                    e.delta.rows(),
                    e.delta.cols(),
                    e.gram.rows(),
                    e.gram.cols()
                );
            }
        }
        PacketAction::Decode { file, json } => {
            let bytes = std::fs::read(file)?;
            let packet = decode_packet(&bytes)?;
            let path = json
                .clone()
                .unwrap_or_else(|| out.dir().join("packet.json"));
            std::fs::write(&path, serde_json::to_string_pretty(&packet)? + "\n")?;
            write_layout(cfg, out, &packet, bytes.len(), file)?;
            println!("decoded {} to {}", file.display(), path.display());
        }
    }
    Ok(())
}

fn write_layout(
    cfg: &RunConfig,
    out: &CommandOutput,
    packet: &collabedit_core::collab::EditPacket,
    total_bytes: usize,
    file: &std::path::Path,
) -> anyhow::Result<()> {
    let rows: Vec<Vec<String>> = packet
        .entries
        .iter()
        .map(|e| {
            vec![
                e.layer_id.to_string(),
                e.delta.rows().to_string(),
                e.delta.cols().to_string(),
                e.gram.rows().to_string(),
            ]
        })
        .collect();
    out.write_csv(&["layer_id", "d_val", "d_key", "gram_dim"], &rows)?;
    out.write_summary(
        cfg,
        serde_json::json!({
            "file": file.display().to_string(),
            "total_bytes": total_bytes,
            "client_id": packet.client_id,
            "round": packet.round,
            "n_layers": packet.entries.len(),
        }),
    )?;
    Ok(())
}
