#include "koa/cli.hpp"

int main(int argc, char** argv) { return koa::cli::run(argc, argv); }
