#include <signal.h>

#include <cstdio>
#include <filesystem>

#include <CLI11.hpp>

#include "rpcool/orch_server.hpp"
#include "rpcool/orchestrator.hpp"

using namespace rpcool;

int main(int argc, char** argv) {
  CLI::App app{"Orchestrator: channel registry, heap address space, leases and quotas"};
  std::string config_path;
  std::string listen = env("RPCOOL_ORCH").value_or(std::string(kDefaultOrchestratorEndpoint));
  std::string pool_dir = env("RPCOOL_POOL_DIR").value_or(std::string(kDefaultPoolDir));
  app.add_option("--config", config_path, "Admin config file (key = value lines)");
  app.add_option("--listen", listen, "host:port");
  app.add_option("--pool-dir", pool_dir, "Directory of heap backing files");
  CLI11_PARSE(app, argc, argv);

  sigset_t stop;
  sigemptyset(&stop);
  sigaddset(&stop, SIGINT);
  sigaddset(&stop, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &stop, nullptr);

  try {
    OrchestratorConfig cfg = config_path.empty() ? OrchestratorConfig{} : OrchestratorConfig::from_file(config_path);
    if (cfg.pool_dir.empty()) cfg.pool_dir = pool_dir;
    std::filesystem::create_directories(cfg.pool_dir);
    Orchestrator core(cfg);
    OrchestratorServer::Options o;
    o.listen = wire::Endpoint::parse(listen);
    OrchestratorServer server(core, o);
    std::printf("rpcool-orchd listening on %s, pool %s\n", server.endpoint().str().c_str(), cfg.pool_dir.c_str());
    std::fflush(stdout);
    int sig = 0;
    sigwait(&stop, &sig);
    server.stop();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "rpcool-orchd: %s\n", e.what());
    return 1;
  }
  return 0;
}
