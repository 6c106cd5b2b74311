"""CLI entry point: guidance-server --port --model --stub."""

import click
import uvicorn

from .server import ServerConfig, create_app, make_backend


@click.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8399, show_default=True)
@click.option("--model", default=None,
              help="bundled backend name (e.g. gray-pull)")
@click.option("--stub", is_flag=True,
              help="serve zero noise predictions (conformance mode)")
@click.option("--max-side", default=1024, show_default=True,
              help="largest accepted image side in pixels")
def main(host, port, model, stub, max_side):
    """Serve the predict_noise wire protocol."""
    config = ServerConfig(model=model, max_side=max_side, port=port,
                          stub=stub)
    try:
        backend = make_backend(config)
    except ValueError as e:
        raise click.UsageError(str(e))
    uvicorn.run(create_app(config, backend), host=host, port=port)


if __name__ == "__main__":
    main()
