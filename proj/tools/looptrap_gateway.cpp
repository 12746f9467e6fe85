// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0
//
// Serves a built-in model over the JSON gateway protocol.
//   looptrap-gateway --model toy-loop --port 8799

#include <CLI11.hpp>
#include <iostream>
#include <string>

#include "looptrap/remote.hpp"
#include "looptrap/workbench.hpp"

int main(int argc, char** argv) {
  CLI::App app{"looptrap-gateway: serve a model over HTTP"};
  std::string model_id = "toy";
  std::string host = "127.0.0.1";
  int port = 8799;
  app.add_option("--model", model_id, "model identifier (toy[:...], toy-loop[:...])");
  app.add_option("--host", host, "bind address");
  app.add_option("--port", port, "port, 0 picks a free one")->check(CLI::Range(0, 65535));
  CLI11_PARSE(app, argc, argv);

  try {
    const looptrap::ModelRegistry registry;
    const looptrap::ModelHandle model = registry.resolve(model_id);
    if (port == 0) {
      looptrap::GatewayServer server(model, host, 0);
      std::cout << "READY " << server.endpoint() << std::endl;
      std::string line;
      while (std::getline(std::cin, line)) {
      }
      return 0;
    }
    std::cout << "READY http://" << host << ":" << port << std::endl;
    looptrap::GatewayServer::serve_forever(model, host, port);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
