# makes app a package; the CLI entry point is app.main:cli
