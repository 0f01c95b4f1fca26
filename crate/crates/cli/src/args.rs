use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Text,
    /// One record per line, tab-separated `key=value` fields.
    Structured,
}

#[derive(Debug, Parser)]
#[command(
    name = "archain",
    version,
    about = "Permissioned archival ledger: certification authority, administrative node and audit tools"
)]
pub struct Cli {
    /// TOML file with defaults for every flag below.
    #[arg(long, global = true, env = "ARCHAIN_CONFIG")]
    pub config: Option<PathBuf>,
    /// Administrative node base URL.
    #[arg(long, global = true, env = "ARCHAIN_NODE")]
    pub node: Option<String>,
    /// Certification authority base URL.
    #[arg(long, global = true, env = "ARCHAIN_CA")]
    pub ca: Option<String>,
    /// Identity file (private key and certificate number).
    #[arg(long, global = true, env = "ARCHAIN_IDENTITY")]
    pub identity: Option<PathBuf>,
    #[arg(long, global = true, env = "ARCHAIN_FORMAT", value_enum)]
    pub format: Option<Format>,
    /// CA session token from `login`.
    #[arg(long, global = true, env = "ARCHAIN_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run or initialize the certification authority.
    #[command(subcommand)]
    Ca(CaCmd),
    /// Run or query the administrative node.
    #[command(subcommand)]
    Node(NodeCmd),
    /// Create an account at the CA (it starts unconfirmed).
    Register(RegisterArgs),
    /// Log in to the CA and print a session token.
    Login(LoginArgs),
    /// List accounts (CA administrator).
    Users,
    /// Change roles (CA administrator).
    #[command(subcommand)]
    Role(RoleCmd),
    /// Fetch or inspect the local identity file.
    #[command(subcommand)]
    Identity(IdentityCmd),
    /// Document workflow.
    #[command(subcommand)]
    Doc(DocCmd),
    /// Ledger inspection and offline verification.
    #[command(subcommand)]
    Chain(ChainCmd),
    /// Secret-file guard tools.
    #[command(subcommand)]
    Guard(GuardCmd),
    /// Certificates.
    #[command(subcommand)]
    Cert(CertCmd),
}

#[derive(Debug, Subcommand)]
pub enum CaCmd {
    /// Create a CA store with its administrator account and root certificate.
    Init(CaInitArgs),
    /// Serve the CA HTTP API.
    Serve(CaServeArgs),
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long, default_value = "")]
    pub first_name: String,
    #[arg(long, default_value = "")]
    pub last_name: String,
    #[arg(long, default_value = "")]
    pub organization: String,
    #[arg(long, default_value = "")]
    pub email: String,
}

#[derive(Debug, Args)]
pub struct CaInitArgs {
    #[arg(long, env = "ARCHAIN_CA_DIR")]
    pub dir: Option<PathBuf>,
    #[arg(long, default_value = "ca-admin")]
    pub admin_user: String,
    #[arg(long, env = "ARCHAIN_CA_ADMIN_PASSWORD", hide_env_values = true)]
    pub admin_password: String,
    #[command(flatten)]
    pub profile: ProfileArgs,
    /// tc26-512-a or tc26-512-b.
    #[arg(long, default_value = "tc26-512-a")]
    pub curve: String,
    /// Certificate lifetime (default 365 days).
    #[arg(long)]
    pub cert_lifetime_days: Option<u64>,
    /// Token nodes present to read the CA chains; random if omitted.
    #[arg(long, env = "ARCHAIN_CA_SYNC_TOKEN", hide_env_values = true)]
    pub sync_token: Option<String>,
}

#[derive(Debug, Args)]
pub struct CaServeArgs {
    #[arg(long, env = "ARCHAIN_CA_DIR")]
    pub dir: Option<PathBuf>,
    #[arg(long, env = "ARCHAIN_CA_LISTEN")]
    pub listen: Option<String>,
    #[arg(long, env = "ARCHAIN_CA_SYNC_TOKEN", hide_env_values = true)]
    pub sync_token: Option<String>,
    /// Node base URL to notify of chain updates; repeatable.
    #[arg(long)]
    pub notify: Vec<String>,
    /// Seconds between expiry sweeps (default 60).
    #[arg(long)]
    pub expiry_sweep_secs: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum NodeCmd {
    /// Serve the node HTTP and WebSocket endpoints.
    Serve(NodeServeArgs),
    /// Print the node's ledger and replica summary.
    Status,
}

#[derive(Debug, Args)]
pub struct NodeServeArgs {
    #[arg(long, env = "ARCHAIN_DATA_DIR")]
    pub dir: Option<PathBuf>,
    #[arg(long, env = "ARCHAIN_NODE_LISTEN")]
    pub listen: Option<String>,
    /// Where the secret file lives; default `<dir>/guard`.
    #[arg(long, env = "ARCHAIN_GUARD_DIR")]
    pub guard_dir: Option<PathBuf>,
    /// The CA's sync token, needed to read its chains.
    #[arg(long, env = "ARCHAIN_CA_TOKEN", hide_env_values = true)]
    pub ca_token: Option<String>,
    /// Trusted CA certificate file; otherwise pinned on first contact.
    #[arg(long, env = "ARCHAIN_CA_ROOT")]
    pub ca_root: Option<PathBuf>,
    /// Seconds between CA chain polls (default 30).
    #[arg(long)]
    pub poll_secs: Option<u64>,
    /// Seconds between examination-deadline checks (default 5).
    #[arg(long)]
    pub tick_secs: Option<u64>,
    /// Time an expert has to decide, in hours (default 72).
    #[arg(long)]
    pub examination_hours: Option<u64>,
    /// Secret-file signature length in bytes; must be odd.
    #[arg(long)]
    pub sign_len: Option<usize>,
    /// Bytes of the signature used for the secret file's name.
    #[arg(long)]
    pub name_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub username: String,
    #[arg(long, env = "ARCHAIN_PASSWORD", hide_env_values = true)]
    pub password: String,
    #[command(flatten)]
    pub profile: ProfileArgs,
}

#[derive(Debug, Args)]
pub struct LoginArgs {
    #[arg(long)]
    pub username: String,
    #[arg(long, env = "ARCHAIN_PASSWORD", hide_env_values = true)]
    pub password: String,
    /// Also write the token to this file (owner-readable only).
    #[arg(long)]
    pub save: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum RoleCmd {
    /// Assign a role; confirmed roles get a fresh certificate.
    Set {
        #[arg(long)]
        user_id: u64,
        #[arg(long)]
        role: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum IdentityCmd {
    /// Pick up the private key waiting at the CA and write the identity file.
    Claim {
        /// Overwrite an existing identity file.
        #[arg(long)]
        force: bool,
    },
    /// Request a replacement certificate after expiry and claim its key.
    Renew,
    /// Print the identity's certificate number and keys.
    Show,
}

#[derive(Debug, Subcommand)]
pub enum DocCmd {
    /// Upload a document (User).
    Submit(SubmitArgs),
    /// List documents, optionally by status.
    List {
        #[arg(long)]
        status: Option<String>,
    },
    /// Show one document with its transition log.
    Show { id: String },
    /// Send a document for examination (Administrator).
    Assign {
        id: String,
        /// Expert's user number.
        #[arg(long)]
        expert: u64,
        #[arg(long)]
        window_hours: Option<u64>,
    },
    /// Approve an assigned document (Expert).
    Approve { id: String },
    /// Reject an assigned document (Expert).
    Reject { id: String },
    /// Write an approved document to the ledger (Administrator).
    Archive {
        id: String,
        /// Expert's append authorization (hex), if not sent with the approval.
        #[arg(long)]
        authorization: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct SubmitArgs {
    pub file: PathBuf,
    /// Document identifier; derived from the content hash if omitted.
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub title: String,
    #[arg(long)]
    pub author: String,
    #[arg(long)]
    pub organization: String,
    /// Extra metadata as key=value; repeatable.
    #[arg(long = "meta", value_name = "KEY=VALUE")]
    pub meta: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum ChainCmd {
    /// Verify a ledger file offline.
    Verify(VerifyArgs),
    /// Print rows from a ledger file or from the node.
    Show {
        #[arg(long)]
        ledger: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        from: usize,
    },
    /// Download the node's ledger file and, with a token, the CA chains.
    Export {
        #[arg(long)]
        out: PathBuf,
        /// Directory for the CA chains and certificates.
        #[arg(long)]
        ca_out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub ledger: PathBuf,
    /// Directory with root.crt, all.tsv, revoked.tsv and certs/ (a node's
    /// `ca` directory or a CA store). Defaults to `ca` next to the ledger.
    #[arg(long)]
    pub ca_dir: Option<PathBuf>,
    /// Trust this CA certificate instead of the directory's root.crt.
    #[arg(long)]
    pub ca_root: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum GuardCmd {
    /// Recompute the ledger signature and compare it with the secret file.
    Check {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        guard_dir: PathBuf,
        #[arg(long)]
        alarm_log: Option<PathBuf>,
        #[arg(long)]
        sign_len: Option<usize>,
        #[arg(long)]
        name_len: Option<usize>,
    },
    /// Copy the current secret file out.
    Export {
        #[arg(long)]
        guard_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Install a secret file, replacing the current one.
    Import {
        #[arg(long)]
        guard_dir: PathBuf,
        file: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum CertCmd {
    /// Print a certificate from the CA or a file.
    Show {
        /// Certificate number to download.
        id: Option<u64>,
        #[arg(long, conflicts_with = "id")]
        file: Option<PathBuf>,
    },
    /// Ask the CA whether a certificate is valid.
    Validate {
        #[arg(long, conflicts_with_all = ["hash", "id"])]
        file: Option<PathBuf>,
        #[arg(long, conflicts_with = "id")]
        hash: Option<String>,
        #[arg(long)]
        id: Option<u64>,
    },
}
